"""Training, evaluation, ablation and robustness harness."""
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import roc_auc_score

from .geometry import pixel_to_ray
from .losses import MODES, LossConfig, NonFiniteLossError, PatchBatch, multi_uncer_loss, psnr, ssim_image
from .model import GeneralizableRenderer, RendererConfig
from .scene import Dataset
from .target_uncertainty import TargetUncertaintyNet, sample_beta_t

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "uncertnerf-checkpoint"
CHECKPOINT_VERSION = 1
PATCH_OFFSETS = (-2, 0, 2)


@dataclass
class TrainConfig:
    n_source_train: int = 4
    n_source_eval: int = 8
    n_patches: int = 113  # 113 * 9 = 1017 rays per batch
    n_samples: int = 48
    iterations: int = 3000
    lr: float = 5e-4
    seed: int = 0
    checkpoint_every: int = 1000
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.n_source_train < 1 or self.n_source_eval < 1:
            raise ValueError("need at least one source view")
        if self.n_patches < 1:
            raise ValueError("rays_per_batch must be at least 9 (one patch)")

    @property
    def rays_per_batch(self) -> int:
        return 9 * self.n_patches

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# config files


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        return value.strip().lower() in ("1", "true", "yes", "on")
    for t, name in ((int, "int"), (float, "float"), (str, "str")):
        if typ in (t, name):
            return t(value)
    return value


def apply_overrides(obj, overrides: Dict[str, str]):
    """Return a copy of a (nested) dataclass with dotted ``key=value`` overrides applied."""
    obj = dataclasses.replace(obj)
    for key, value in overrides.items():
        target = obj
        *parents, leaf = key.split(".")
        for p in parents:
            child = dataclasses.replace(getattr(target, p))
            setattr(target, p, child)
            target = child
        fields = {f.name: f for f in dataclasses.fields(target)}
        if leaf not in fields:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, leaf, _coerce(value, fields[leaf].type))
    return _revalidate(obj)


def _revalidate(obj):
    if not dataclasses.is_dataclass(obj):
        return obj
    return type(obj)(**{f.name: _revalidate(getattr(obj, f.name)) for f in dataclasses.fields(obj)})


def read_kv_file(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# ray / source selection


def sample_patch_rays(height: int, width: int, n_patches: int, rng: np.random.Generator) -> np.ndarray:
    """Pixel coordinates ``(B, 3, 3, 2)`` of 3x3 patches with dilation 2, as (u, v)."""
    if height < 5 or width < 5:
        raise ValueError("image must be at least 5x5 for dilated 3x3 patches")
    cu = rng.integers(2, width - 2, size=n_patches)
    cv = rng.integers(2, height - 2, size=n_patches)
    return patch_pixels(cu, cv)


def patch_pixels(cu, cv) -> np.ndarray:
    off = np.array(PATCH_OFFSETS)
    u = np.asarray(cu)[:, None, None] + off[None, None, :]
    v = np.asarray(cv)[:, None, None] + off[None, :, None]
    u, v = np.broadcast_arrays(u, v)
    return np.stack([u, v], axis=-1)


def ring_distance(a: float, b: float) -> float:
    d = abs(a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def nearest_sources(ds: Dataset, target: int, n: int, candidates: Optional[Sequence[int]] = None) -> List[int]:
    candidates = ds.train_indices if candidates is None else candidates
    pool = [i for i in candidates if i != target]
    if len(pool) < n:
        raise ValueError(f"need {n} source views, only {len(pool)} available")
    pool.sort(key=lambda i: (ring_distance(ds.azimuths[i], ds.azimuths[target]), i))
    return pool[:n]


# ---------------------------------------------------------------------------
# training


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset, out_dir=None):
        self.cfg = cfg
        self.ds = dataset
        self.out_dir = Path(out_dir) if out_dir else None
        if len(dataset.train_indices) < cfg.n_source_train + 1:
            raise ValueError("dataset needs at least n_source_train + 1 training views")
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.renderer = GeneralizableRenderer(RendererConfig(near=dataset.near, far=dataset.far,
                                                                 n_samples=cfg.n_samples))
            self.target_net = TargetUncertaintyNet()
        self.optimizer = torch.optim.Adam(list(self.renderer.parameters()) + list(self.target_net.parameters()),
                                          lr=cfg.lr)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.images = torch.from_numpy(np.stack([v.image for v in dataset.views]))
        self.cameras = [(v.intrinsics, v.pose) for v in dataset.views]

    def parameters_snapshot(self):
        return {"renderer": {k: v.clone() for k, v in self.renderer.state_dict().items()},
                "target_uncertainty": {k: v.clone() for k, v in self.target_net.state_dict().items()}}

    def step(self) -> dict:
        cfg, ds = self.cfg, self.ds
        target = int(self.rng.choice(ds.train_indices))
        src_idx = nearest_sources(ds, target, cfg.n_source_train)
        H, W = self.images.shape[1:3]
        pix = sample_patch_rays(H, W, cfg.n_patches, self.rng)
        u = torch.from_numpy(pix[..., 0].reshape(-1))
        v = torch.from_numpy(pix[..., 1].reshape(-1))
        intr, pose = self.cameras[target]
        ray = pixel_to_ray(intr, pose, u.float(), v.float())

        sources = self.renderer.make_sources(self.images[src_idx], [self.cameras[i] for i in src_idx])
        out = self.renderer(ray.origin, ray.direction, sources, stratified=True, generator=self.generator)
        B = cfg.n_patches
        image = self.images[target]
        beta_map = self.target_net(image)
        batch = PatchBatch(
            gt=image[v, u].reshape(B, 3, 3, 3),
            pred=out["color"].reshape(B, 3, 3, 3),
            beta_s=out["beta_s"].reshape(B, 9).mean(1),
            beta_t=sample_beta_t(beta_map, u.reshape(B, 9)[:, 4], v.reshape(B, 9)[:, 4]),
            pixels=torch.from_numpy(pix),
        )
        try:
            loss, diag = multi_uncer_loss(batch, cfg.loss)
        except NonFiniteLossError as exc:
            self._dump_batch(target, src_idx, pix, exc.diagnostics)
            raise
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.iteration += 1
        stats = {k: float(diag[k].detach().mean()) for k in
                 ("mse", "ssim", "data_term", "log_term", "beta_ts", "beta_s", "beta_t")}
        return {"iteration": self.iteration, "loss": float(loss.detach()), "target": target, "sources": src_idx,
                **stats}

    def _dump_batch(self, target, src_idx, pix, diagnostics):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nonfinite_batch_{self.iteration:06d}.pt"
        torch.save({"iteration": self.iteration, "target": target, "sources": src_idx,
                    "pixels": torch.from_numpy(pix), "diagnostics": diagnostics}, path)
        log.error("non-finite loss at iteration %d; batch written to %s", self.iteration, path)

    def train(self, iterations: Optional[int] = None, log_fn: Optional[Callable[[dict], None]] = None) -> List[dict]:
        iterations = self.cfg.iterations if iterations is None else iterations
        records = []
        if log_fn:
            log_fn({"event": "train_start", "n_source": self.cfg.n_source_train, "mode": self.cfg.loss.mode,
                    "config_hash": self.cfg.hash(), "rays_per_batch": self.cfg.rays_per_batch})
        for _ in range(iterations):
            rec = self.step()
            records.append(rec)
            if log_fn:
                log_fn(rec)
            if self.out_dir and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / "checkpoint.pt")
        return records

    # -- persistence -------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "renderer": self.renderer.state_dict(), "target_uncertainty": self.target_net.state_dict(),
            "optimizer": self.optimizer.state_dict(), "iteration": self.iteration,
            "config": self.cfg.to_dict(), "renderer_config": asdict(self.renderer.cfg),
            "rng": {"numpy": self.rng.bit_generator.state, "torch": self.generator.get_state()},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path, dataset: Dataset, out_dir=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        cfg = TrainConfig(**ckpt["config"])
        trainer = cls(cfg, dataset, out_dir)
        trainer.renderer.load_state_dict(ckpt["renderer"])
        if ckpt.get("target_uncertainty") is not None:
            trainer.target_net.load_state_dict(ckpt["target_uncertainty"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.iteration = ckpt["iteration"]
        trainer.rng.bit_generator.state = ckpt["rng"]["numpy"]
        trainer.generator.set_state(ckpt["rng"]["torch"])
        return trainer


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt['version']}")
    return ckpt


def renderer_from_checkpoint(ckpt: dict):
    """Rebuild the inference-time modules; the target-uncertainty net is optional."""
    renderer = GeneralizableRenderer(RendererConfig(**ckpt["renderer_config"]))
    renderer.load_state_dict(ckpt["renderer"])
    target_net = None
    if ckpt.get("target_uncertainty") is not None:
        target_net = TargetUncertaintyNet()
        target_net.load_state_dict(ckpt["target_uncertainty"])
    return renderer, target_net


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, log_fn=None):
    trainer = Trainer(cfg, dataset, out_dir)
    records = trainer.train(log_fn=log_fn)
    if out_dir:
        trainer.save(Path(out_dir) / "checkpoint.pt")
    return trainer, records


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    psnr: List[float]
    ssim: List[float]
    views: List[int]
    mean_psnr: float
    mean_ssim: float
    auroc: Optional[float]
    beta_t_inside: Optional[float]
    beta_t_outside: Optional[float]
    n_source: int
    wall_clock: float
    config_hash: str
    label: str = ""

    def to_dict(self):
        return asdict(self)


def source_images_for_level(ds: Dataset, sources: Sequence[int], level: int) -> torch.Tensor:
    """Images for ``sources`` where exactly ``level`` distractor-bearing views keep their distractors.

    The ``level`` nearest distractor-bearing views (in the given order) keep
    their captured image; every other source is replaced by its clean render.
    """
    dirty = [i for i in sources if ds.views[i].mask.any()]
    if level > len(dirty):
        raise ValueError(f"level {level} exceeds the {len(dirty)} distractor-bearing views available")
    keep = set(dirty[:level])
    return torch.from_numpy(np.stack([ds.views[i].image if i in keep else ds.views[i].clean_image
                                      for i in sources]))


def render_with_sources(renderer: GeneralizableRenderer, ds: Dataset, target: int, sources: Sequence[int],
                        images: Optional[torch.Tensor] = None):
    if images is None:
        images = torch.from_numpy(np.stack([ds.views[i].image for i in sources]))
    with torch.no_grad():
        src = renderer.make_sources(images, [(ds.views[i].intrinsics, ds.views[i].pose) for i in sources])
        view = ds.views[target]
        return renderer.render_image(view.intrinsics, view.pose, src)


def uncertainty_auroc(target_net: TargetUncertaintyNet, ds: Dataset):
    """Pixelwise AUROC of predicted target-view uncertainty against distractor masks."""
    scores, labels = [], []
    with torch.no_grad():
        for i in ds.distractor_views:
            beta = target_net(torch.from_numpy(ds.views[i].image))[..., 0]
            scores.append(beta.double().numpy().ravel())
            labels.append(ds.views[i].mask.ravel())
    if not scores:
        return None, None, None
    s = np.concatenate(scores)
    y = np.concatenate(labels)
    return float(roc_auc_score(y, s)), float(s[y].mean()), float(s[~y].mean())


def evaluate(renderer: GeneralizableRenderer, ds: Dataset, n_source: int = 8,
             target_net: Optional[TargetUncertaintyNet] = None, level: Optional[int] = None,
             config_hash: str = "", label: str = "") -> EvalReport:
    """PSNR/SSIM of every eval target against its clean reference.

    With ``level`` set, the source images are rebuilt so exactly ``level`` of
    them carry distractors (see :func:`source_images_for_level`).
    """
    start = time.perf_counter()
    psnrs, ssims = [], []
    targets = ds.eval_indices
    if not targets:
        raise ValueError("dataset has no eval-target views")
    for t in targets:
        ref = ds.views[t].clean_image
        if ref is None:
            raise ValueError(f"eval view {t} has no clean reference")
        sources = nearest_sources(ds, t, n_source)
        images = None if level is None else source_images_for_level(ds, sources, level)
        img, _ = render_with_sources(renderer, ds, t, sources, images)
        ref = torch.from_numpy(ref)
        psnrs.append(psnr(img, ref))
        ssims.append(ssim_image(img, ref))
    auroc = inside = outside = None
    if target_net is not None:
        auroc, inside, outside = uncertainty_auroc(target_net, ds)
    return EvalReport(psnrs, ssims, targets, float(np.mean(psnrs)), float(np.mean(ssims)), auroc, inside, outside,
                      n_source, time.perf_counter() - start, config_hash, label)


def ablate(cfg: TrainConfig, ds: Dataset, modes: Sequence[str] = MODES, out_dir=None,
           log_fn: Optional[Callable[[dict], None]] = None) -> Dict[str, EvalReport]:
    """One model per loss mode; everything except the loss mode is shared."""
    reports = {}
    for mode in modes:
        mode_cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, mode=mode))
        run_dir = Path(out_dir) / mode if out_dir else None
        trainer, _ = train(mode_cfg, ds, run_dir, log_fn)
        reports[mode] = evaluate(trainer.renderer, ds, cfg.n_source_eval, trainer.target_net,
                                 config_hash=mode_cfg.hash(), label=mode)
        if log_fn:
            log_fn({"event": "ablation_row", **reports[mode].to_dict()})
    return reports


def robustness_sweep(renderer: GeneralizableRenderer, ds: Dataset, levels: Sequence[int],
                     n_source: int = 8, config_hash: str = "") -> Dict[int, EvalReport]:
    for level in levels:
        if not 0 <= level <= n_source:
            raise ValueError(f"level {level} outside [0, {n_source}]")
    return {level: evaluate(renderer, ds, n_source, level=level, config_hash=config_hash, label=f"{level}-distractors")
            for level in levels}


def format_table(rows: Dict, key_name: str = "mode") -> str:
    lines = [f"{key_name:>14} {'PSNR':>8} {'SSIM':>7} {'AUROC':>7}"]
    for key, rep in rows.items():
        auroc = "-" if rep.auroc is None else f"{rep.auroc:.3f}"
        lines.append(f"{str(key):>14} {rep.mean_psnr:8.2f} {rep.mean_ssim:7.3f} {auroc:>7}")
    return "\n".join(lines)


def normalize_heatmap(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)
