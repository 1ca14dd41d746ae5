"""Deterministic synthetic multi-view scenes with per-view transient distractors.

Images are produced by analytic ray casting against spheres, axis-aligned
boxes, a finite ground square and camera-facing billboards, shaded with one
directional light plus ambient. The renderer doubles as the ground-truth
oracle for masks: a pixel is masked iff its first hit is a distractor.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Intrinsics, Pose

BACKGROUND = (0.72, 0.78, 0.88)
PRIMITIVE_KINDS = ("sphere", "box", "ground")
DISTRACTOR_KINDS = ("sphere", "box", "billboard")
_VIVID = np.array([
    [0.95, 0.10, 0.10], [0.10, 0.90, 0.20], [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.05], [0.90, 0.10, 0.90], [0.05, 0.90, 0.90],
])


@dataclass
class Primitive:
    kind: str
    center: np.ndarray
    size: object  # radius, half-extents (3,), or ground half-width
    albedo: np.ndarray
    texture: dict = field(default_factory=lambda: {"kind": "none"})

    def to_dict(self):
        size = np.asarray(self.size, dtype=float).tolist()
        return {"kind": self.kind, "center": np.asarray(self.center).tolist(), "size": size,
                "albedo": np.asarray(self.albedo).tolist(), "texture": dict(self.texture)}

    @classmethod
    def from_dict(cls, d):
        size = d["size"]
        size = np.asarray(size, dtype=float) if isinstance(size, list) else float(size)
        return cls(d["kind"], np.asarray(d["center"], dtype=float), size,
                   np.asarray(d["albedo"], dtype=float), dict(d["texture"]))


@dataclass
class SceneSpec:
    seed: int
    primitives: List[Primitive]
    light_direction: np.ndarray
    ambient: float
    background: Tuple[float, float, float] = BACKGROUND

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if p.kind not in PRIMITIVE_KINDS:
                raise ValueError(f"unknown primitive kind {p.kind!r}")
            if np.any(np.asarray(p.albedo) < 0) or np.any(np.asarray(p.albedo) > 1):
                raise ValueError("albedo outside [0, 1]")
        if abs(np.linalg.norm(self.light_direction) - 1.0) > 1e-9:
            raise ValueError("light_direction must be unit length")

    def to_dict(self):
        return {"seed": self.seed, "primitives": [p.to_dict() for p in self.primitives],
                "light_direction": np.asarray(self.light_direction).tolist(),
                "ambient": self.ambient, "background": list(self.background)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["seed"], [Primitive.from_dict(p) for p in d["primitives"]],
                   np.asarray(d["light_direction"], dtype=float), d["ambient"],
                   tuple(d["background"]))


@dataclass
class DistractorSpec:
    kind: str
    per_view_presence: List[bool]
    per_view_placement: Dict[int, dict]  # view -> {"center", "size", optional "normal"}
    albedo: np.ndarray

    def __post_init__(self):
        if self.kind not in DISTRACTOR_KINDS:
            raise ValueError(f"unknown distractor kind {self.kind!r}")
        present = {i for i, p in enumerate(self.per_view_presence) if p}
        if present != set(self.per_view_placement):
            raise ValueError("placements must exist exactly for the views where the distractor is present")

    def present_in(self, view_index: int) -> bool:
        return 0 <= view_index < len(self.per_view_presence) and self.per_view_presence[view_index]

    def to_dict(self):
        placement = {str(k): {kk: np.asarray(vv).tolist() for kk, vv in v.items()}
                     for k, v in self.per_view_placement.items()}
        return {"kind": self.kind, "per_view_presence": list(self.per_view_presence),
                "per_view_placement": placement, "albedo": np.asarray(self.albedo).tolist()}

    @classmethod
    def from_dict(cls, d):
        placement = {int(k): {kk: np.asarray(vv, dtype=float) for kk, vv in v.items()}
                     for k, v in d["per_view_placement"].items()}
        return cls(d["kind"], list(d["per_view_presence"]), placement,
                   np.asarray(d["albedo"], dtype=float))


@dataclass
class ViewCapture:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    clean_image: np.ndarray
    mask: np.ndarray  # H x W bool
    intrinsics: Intrinsics
    pose: Pose


@dataclass
class Dataset:
    views: List[ViewCapture]
    split: List[str]  # "train" or "eval-target"
    near: float
    far: float
    seed: int
    distractor_level: int
    azimuths: List[float]
    scene: Optional[SceneSpec] = None
    distractors: List[DistractorSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if len(self.split) != len(self.views) or len(self.azimuths) != len(self.views):
            raise ValueError("split/azimuth tags must match the number of views")

    @property
    def train_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == "train"]

    @property
    def eval_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == "eval-target"]

    @property
    def distractor_views(self) -> List[int]:
        return [i for i in self.train_indices if self.views[i].mask.any()]


@dataclass
class SceneConfig:
    n_primitives: int = 4
    scene_radius: float = 1.1
    ground_half_size: float = 2.0
    ambient: float = 0.35


@dataclass
class DatasetConfig:
    n_views: int = 16
    distractor_level: int = 8
    n_eval: int = 4
    height: int = 64
    width: int = 96
    focal: float = 90.0  # at width 96; scaled with width
    ring_radius: float = 4.0
    elevation_deg: float = 25.0
    elevation_jitter_deg: float = 8.0
    near: float = 1.5
    far: float = 7.0
    n_distractors: int = 2
    max_coverage: float = 0.25
    distractor_size_min: float = 0.4
    distractor_size_max: float = 0.6
    distractor_radius: float = 1.0  # anchors lie within this distance of the ring center
    distractor_jitter: float = 0.2  # per-view wander around the anchor (world units)
    scene: SceneConfig = field(default_factory=SceneConfig)


# ---------------------------------------------------------------------------
# scene generation


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> SceneSpec:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    config = config or SceneConfig()
    if config.n_primitives <= 0:
        raise ValueError("n_primitives must be positive")
    rng = np.random.default_rng([seed, 0])

    ground = Primitive("ground", np.zeros(3), float(config.ground_half_size),
                       np.array([0.55, 0.52, 0.48]),
                       {"kind": "checker", "freq": 2.0, "amp": 0.45})
    primitives = [ground]
    placed: List[Tuple[np.ndarray, float]] = []
    for _ in range(config.n_primitives):
        kind = "sphere" if rng.random() < 0.5 else "box"
        for _attempt in range(200):
            r = rng.uniform(0.22, 0.42)
            rho = config.scene_radius * np.sqrt(rng.random())
            phi = rng.uniform(0, 2 * np.pi)
            xz = np.array([rho * np.cos(phi), rho * np.sin(phi)])
            if all(np.linalg.norm(xz - c) > r + cr + 0.05 for c, cr in placed):
                break
        placed.append((xz, r))
        base = rng.uniform(0.3, 0.8, size=3)
        albedo = 0.6 * base + 0.4 * base.mean()  # muted palette
        if rng.random() < 0.5:
            texture = {"kind": "checker", "freq": float(rng.uniform(4, 9)), "amp": float(rng.uniform(0.3, 0.6))}
        else:
            texture = {"kind": "noise", "freq": float(rng.uniform(5, 11)), "amp": float(rng.uniform(0.4, 0.7)),
                       "phase": rng.uniform(0, 2 * np.pi, size=3).tolist()}
        if kind == "sphere":
            center = np.array([xz[0], r, xz[1]])
            size = float(r)
        else:
            half = rng.uniform(0.7, 1.0, size=3) * r
            center = np.array([xz[0], half[1], xz[1]])
            size = half
        primitives.append(Primitive(kind, center, size, albedo, texture))

    light = np.array([rng.uniform(-0.6, 0.6), 1.0, rng.uniform(-0.6, 0.6)])
    light /= np.linalg.norm(light)
    return SceneSpec(seed, primitives, light, float(config.ambient))


# ---------------------------------------------------------------------------
# ray casting


def camera_rays(intr: Intrinsics, pose: Pose):
    """All pixel rays of a view, shape (H*W, 3) each."""
    v, u = np.meshgrid(np.arange(intr.height, dtype=np.float64),
                       np.arange(intr.width, dtype=np.float64), indexing="ij")
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1).reshape(-1, 3)
    d = d_cam @ pose.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.center, d.shape)
    return o, d


def _billboard_axes(normal):
    n = np.asarray(normal, dtype=np.float64)
    a1 = np.cross(n, [0.0, 1.0, 0.0])
    if np.linalg.norm(a1) < 1e-8:
        a1 = np.cross(n, [1.0, 0.0, 0.0])
    a1 /= np.linalg.norm(a1)
    return a1, np.cross(n, a1)


def intersect(kind, center, size, o, d, normal=None, eps=1e-6):
    """Nearest positive hit distance (inf on miss) and surface normals."""
    center = np.asarray(center, dtype=np.float64)
    n_rays = d.shape[0]
    t = np.full(n_rays, np.inf)
    normals = np.zeros((n_rays, 3))
    if kind == "sphere":
        oc = o - center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - float(size) ** 2
        disc = b * b - c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        tt = np.where(t0 > eps, t0, t1)
        hit &= tt > eps
        t = np.where(hit, tt, np.inf)
        p = o + np.where(hit, tt, 0.0)[:, None] * d
        normals = (p - center) / float(size)
    elif kind == "box":
        half = np.broadcast_to(np.asarray(size, dtype=np.float64), (3,))
        d_safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
        t1 = (center - half - o) / d_safe
        t2 = (center + half - o) / d_safe
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        hit = (t_near <= t_far) & (t_far > eps)
        entering = t_near > eps
        tt = np.where(entering, t_near, t_far)
        t = np.where(hit, tt, np.inf)
        axis = np.where(entering, tmin.argmax(axis=1), tmax.argmin(axis=1))
        idx = np.arange(n_rays)
        sign = -np.sign(d_safe[idx, axis])
        sign = np.where(entering, sign, -sign)
        normals[idx, axis] = sign
    elif kind == "ground":
        half = float(size)
        dy = np.where(np.abs(d[:, 1]) < 1e-12, 1e-12, d[:, 1])
        tt = (center[1] - o[:, 1]) / dy
        p = o + tt[:, None] * d
        hit = (tt > eps) & (np.abs(p[:, 0] - center[0]) <= half) & (np.abs(p[:, 2] - center[2]) <= half)
        t = np.where(hit, tt, np.inf)
        normals[:, 1] = np.where(o[:, 1] >= center[1], 1.0, -1.0)
    elif kind == "billboard":
        n = np.asarray(normal, dtype=np.float64)
        a1, a2 = _billboard_axes(n)
        denom = d @ n
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        tt = ((center - o) @ n) / denom
        p = o + tt[:, None] * d - center
        half = float(size)
        hit = (tt > eps) & (np.abs(p @ a1) <= half) & (np.abs(p @ a2) <= half)
        t = np.where(hit, tt, np.inf)
        normals[:] = np.where((denom < 0)[:, None], n, -n)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return t, normals


def _texture(tex: dict, p: np.ndarray) -> np.ndarray:
    kind = tex.get("kind", "none")
    if kind == "checker":
        cells = np.floor(tex["freq"] * p).astype(np.int64).sum(axis=1)
        return 1.0 - tex["amp"] * (cells % 2)
    if kind == "noise":
        ph = np.asarray(tex.get("phase", [0.0, 0.0, 0.0]))
        s = np.sin(tex["freq"] * p + ph).prod(axis=1)
        return 1.0 - tex["amp"] * 0.5 * (1.0 + s)
    return np.ones(p.shape[0])


def _shade(albedo, tex_factor, normals, light, ambient):
    lambert = np.clip(normals @ light, 0.0, None)
    return np.asarray(albedo)[None, :] * (tex_factor * (ambient + (1 - ambient) * lambert))[:, None]


def _to_float(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float32) / np.float32(255)


def quantize(img: np.ndarray) -> np.ndarray:
    """8-bit sensor quantization; makes images round-trip losslessly through PNG."""
    return _to_float(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8))


def _trace_static(scene: SceneSpec, o, d):
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    color = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (n, 3)).copy()
    for prim in scene.primitives:
        t, normals = intersect(prim.kind, prim.center, prim.size, o, d)
        closer = t < best_t
        if not closer.any():
            continue
        p = o[closer] + t[closer, None] * d[closer]
        color[closer] = _shade(prim.albedo, _texture(prim.texture, p), normals[closer],
                               scene.light_direction, scene.ambient)
        best_t = np.where(closer, t, best_t)
    return best_t, color


def _trace_distractors(scene: SceneSpec, distractors, view_index, o, d):
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    color = np.zeros((n, 3))
    for dist in distractors:
        if not dist.present_in(view_index):
            continue
        place = dist.per_view_placement[view_index]
        t, normals = intersect(dist.kind, place["center"], place["size"], o, d, normal=place.get("normal"))
        if dist.kind == "billboard":
            normals = np.abs(normals)  # two-sided
        closer = t < best_t
        if not closer.any():
            continue
        color[closer] = _shade(dist.albedo, np.ones(int(closer.sum())), normals[closer],
                               scene.light_direction, scene.ambient)
        best_t = np.where(closer, t, best_t)
    return best_t, color


def render_view(scene: SceneSpec, pose: Pose, intrinsics: Intrinsics,
                distractors: Sequence[DistractorSpec] = (), view_index: int = -1) -> ViewCapture:
    if intrinsics.fx <= 0 or intrinsics.fy <= 0:
        raise ValueError("degenerate intrinsics")
    H, W = intrinsics.height, intrinsics.width
    o, d = camera_rays(intrinsics, pose)
    t_static, c_static = _trace_static(scene, o, d)
    t_dist, c_dist = _trace_distractors(scene, distractors, view_index, o, d)
    mask = t_dist < t_static
    clean = quantize(c_static.reshape(H, W, 3))
    dirty = quantize(c_dist.reshape(H, W, 3))
    mask = mask.reshape(H, W)
    image = np.where(mask[..., None], dirty, clean)
    return ViewCapture(image, clean, mask, intrinsics, pose)


# ---------------------------------------------------------------------------
# datasets


def spread_order(n: int, offset: int = 0) -> List[int]:
    """Indices 0..n-1 ordered so every prefix is spread evenly around a ring."""

    def radical_inverse(i):
        inv, base = 0.0, 0.5
        while i:
            inv += base * (i & 1)
            i >>= 1
            base *= 0.5
        return inv

    keyed = sorted(range(n), key=radical_inverse)
    return [(i + offset) % n for i in keyed]


def ring_pose(azimuth: float, elevation: float, radius: float) -> Pose:
    eye = radius * np.array([np.cos(elevation) * np.sin(azimuth), np.sin(elevation),
                             np.cos(elevation) * np.cos(azimuth)])
    return Pose.look_at(eye, np.array([0.0, 0.25, 0.0]))


def _distractor_anchors(seed, n_objects, kinds, size_range, radius):
    """World-space resting positions and sizes shared by every view that shows the object."""
    rng = np.random.default_rng([seed, 3])
    anchors = []
    for j in range(n_objects):
        rho = radius * np.sqrt(rng.random())
        phi = rng.uniform(0, 2 * np.pi)
        size = rng.uniform(*size_range)
        anchors.append({"center": np.array([rho * np.cos(phi), size, rho * np.sin(phi)]), "size": size})
    return anchors


def _place_distractors(scene, rng_seed, pose, intr, anchors, kinds, albedos, max_coverage, jitter):
    """Per-view placements: each object wanders around its anchor; screen coverage is capped."""
    rng = np.random.default_rng(rng_seed)
    placements = []
    for j, anchor in enumerate(anchors):
        size = anchor["size"] * rng.uniform(0.85, 1.15)
        offset = rng.normal(0, jitter, size=2)
        center = anchor["center"] + np.array([offset[0], size - anchor["size"], offset[1]])
        placement = {"center": center, "size": size if kinds[j] != "box" else np.full(3, size)}
        if kinds[j] == "billboard":
            to_cam = pose.center - center
            placement["normal"] = to_cam / np.linalg.norm(to_cam)
        placements.append(placement)

    def coverage(places):
        specs = [DistractorSpec(kinds[j], [True], {0: places[j]}, albedos[j]) for j in range(len(places))]
        o, d = camera_rays(intr, pose)
        t_static, _ = _trace_static(scene, o, d)
        t_dist, _ = _trace_distractors(scene, specs, 0, o, d)
        return (t_dist < t_static).mean()

    for _ in range(50):
        cov = coverage(placements)
        if 0 < cov <= max_coverage:
            break
        for p in placements:
            if cov > max_coverage:
                p["size"] = p["size"] * 0.85
            else:  # hidden behind static geometry: pull towards the camera
                p["center"] = pose.center + 0.8 * (p["center"] - pose.center)
    return placements


def make_dataset(seed: int = 0, config: Optional[DatasetConfig] = None, **overrides) -> Dataset:
    """Ring of inward-facing training views plus clean eval targets between them.

    ``distractor_level`` training views carry distractors; the set at level L
    is a prefix of the set at level L+1, with identical placements.
    """
    config = config or DatasetConfig()
    if overrides:
        config = DatasetConfig(**{**config.__dict__, **overrides})
    n = config.n_views
    if n < 2:
        raise ValueError("need at least two views")
    if not 0 <= config.distractor_level <= n:
        raise ValueError("distractor_level must lie in [0, n_views]")
    if config.height % 8 or config.width % 8:
        raise ValueError("image size must be divisible by 8")

    scene = generate_scene(seed, config.scene)
    intr = Intrinsics(config.focal * config.width / 96, config.focal * config.width / 96,
                      (config.width - 1) / 2, (config.height - 1) / 2, config.width, config.height)
    jitter_rng = np.random.default_rng([seed, 1])
    base_el = np.deg2rad(config.elevation_deg)
    jit = np.deg2rad(config.elevation_jitter_deg)

    azimuths = [2 * np.pi * i / n for i in range(n)]
    for j in range(config.n_eval):
        k = int(round(j * n / config.n_eval))
        azimuths.append(2 * np.pi * (k + 0.5) / n)
    elevations = base_el + jitter_rng.uniform(-jit, jit, size=len(azimuths))
    poses = [ring_pose(a, e, config.ring_radius) for a, e in zip(azimuths, elevations)]

    dirty = set(spread_order(n, offset=seed % n)[:config.distractor_level])
    kind_rng = np.random.default_rng([seed, 2])
    kinds = [DISTRACTOR_KINDS[k] for k in kind_rng.integers(0, 3, size=config.n_distractors)]
    albedos = [np.clip(_VIVID[k] + kind_rng.uniform(-0.05, 0.05, 3), 0, 1)
               for k in kind_rng.integers(0, len(_VIVID), size=config.n_distractors)]
    anchors = _distractor_anchors(seed, config.n_distractors, kinds,
                                  (config.distractor_size_min, config.distractor_size_max), config.distractor_radius)
    placements: Dict[int, list] = {}
    for v in sorted(dirty):
        placements[v] = _place_distractors(scene, [seed, 100 + v], poses[v], intr, anchors, kinds, albedos,
                                           config.max_coverage, config.distractor_jitter)
    distractors = []
    for j in range(config.n_distractors):
        presence = [i in dirty for i in range(n)]
        distractors.append(DistractorSpec(kinds[j], presence, {v: placements[v][j] for v in sorted(dirty)},
                                          albedos[j]))

    views = [render_view(scene, poses[i], intr, distractors, i) for i in range(n)]
    views += [render_view(scene, poses[i], intr, (), -1) for i in range(n, len(poses))]
    split = ["train"] * n + ["eval-target"] * config.n_eval
    return Dataset(views, split, config.near, config.far, seed, config.distractor_level,
                   [float(a) for a in azimuths], scene, distractors)
