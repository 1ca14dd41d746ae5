"""On-disk dataset layout: PNG images, 1-bit PNG masks and a JSON manifest."""
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose
from .scene import Dataset, DistractorSpec, SceneSpec, ViewCapture, _to_float

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _save_rgb(path: Path, img: np.ndarray):
    q = np.round(img * 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return _to_float(np.asarray(im.convert("RGB")))


def save_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for i, view in enumerate(ds.views):
        stem = f"view_{i:03d}"
        _save_rgb(root / f"{stem}.png", view.image)
        _save_rgb(root / f"{stem}_clean.png", view.clean_image)
        Image.fromarray(view.mask).convert("1").save(root / f"{stem}_mask.png")
        intr = view.intrinsics
        views.append({
            "image": f"{stem}.png", "clean_image": f"{stem}_clean.png", "mask": f"{stem}_mask.png",
            "split": ds.split[i], "azimuth": ds.azimuths[i],
            "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                           "width": intr.width, "height": intr.height},
            "pose": {"R": view.pose.rotation.reshape(-1).tolist(), "t": view.pose.translation.tolist()},
        })
    manifest = {
        "format": "uncertnerf-dataset", "version": FORMAT_VERSION, "seed": ds.seed,
        "distractor_level": ds.distractor_level, "near": ds.near, "far": ds.far, "views": views,
        "scene": ds.scene.to_dict() if ds.scene is not None else None,
        "distractors": [d.to_dict() for d in ds.distractors],
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    if manifest.get("format") != "uncertnerf-dataset":
        raise ValueError(f"{root} does not hold a dataset manifest")
    if manifest["version"] > FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {manifest['version']}")
    views, split, azimuths = [], [], []
    for v in manifest["views"]:
        intr = Intrinsics(**v["intrinsics"])
        pose = Pose(np.asarray(v["pose"]["R"]).reshape(3, 3), np.asarray(v["pose"]["t"]))
        with Image.open(root / v["mask"]) as im:
            mask = np.asarray(im.convert("L")) > 0
        views.append(ViewCapture(_load_rgb(root / v["image"]), _load_rgb(root / v["clean_image"]), mask, intr, pose))
        split.append(v["split"])
        azimuths.append(v["azimuth"])
    scene = SceneSpec.from_dict(manifest["scene"]) if manifest.get("scene") else None
    distractors = [DistractorSpec.from_dict(d) for d in manifest.get("distractors", [])]
    return Dataset(views, split, manifest["near"], manifest["far"], manifest["seed"],
                   manifest["distractor_level"], azimuths, scene, distractors)
