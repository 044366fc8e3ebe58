"""Synthetic vascular phantoms and dataset I/O.

Branching centerline trees are grown by a seeded random walk, swept into
binary labels with an exact capsule test, and rendered to intensities with
blur and noise. Volumes travel as .img.vvol/.lbl.vvol pairs plus a .meta
text file; a manifest lists the train/test stems.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FileFormatError

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
DTYPE_IMAGE = 1  # float64
DTYPE_LABEL = 2  # uint8
_HEADER = struct.Struct("<4sBB3I3f")
_MAX_VOXELS = 1 << 31


@dataclass
class GenParams:
    """Phantom generator knobs; defaults sized so the tiny model overfits fast."""

    grid: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (0.4, 0.4, 0.4)
    root_radius: float = 3.0
    branch_prob: float = 0.08
    angle_min: float = 0.35
    angle_max: float = 0.9
    radius_decay: float = 0.75
    tree_count: int = 2
    fg_mean: float = 0.8
    bg_mean: float = 0.2
    noise_sigma: float = 0.05
    blur_radius: float = 1.0
    step_length: float = 3.0
    max_steps: int = 48
    min_radius: float = 0.8
    direction_wobble: float = 0.25

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.grid) < 4:
            raise ConfigError(f"grid dims must be >= 4, got {self.grid}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if not 0.0 <= self.branch_prob <= 1.0:
            raise ConfigError(f"branch_prob must be in [0, 1], got {self.branch_prob}")
        if self.root_radius <= 0 or self.root_radius >= min(self.grid) / 2:
            raise ConfigError(
                f"root_radius must be in (0, min(grid)/2), got {self.root_radius}"
            )
        if not 0.0 < self.radius_decay <= 1.0:
            raise ConfigError(f"radius_decay must be in (0, 1], got {self.radius_decay}")
        for name in ("tree_count", "max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("step_length", "min_radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ConfigError("noise_sigma and blur_radius must be >= 0")
        if self.angle_min < 0 or self.angle_max < self.angle_min:
            raise ConfigError("need 0 <= angle_min <= angle_max")


@dataclass
class Segment:
    start: np.ndarray
    end: np.ndarray
    r_start: float
    r_end: float


@dataclass
class VesselTree:
    """Capsule segments plus parent links and per-segment branch depth."""

    segments: list[Segment] = field(default_factory=list)
    parents: list[int] = field(default_factory=list)
    depths: list[int] = field(default_factory=list)

    def branch_points(self) -> int:
        from collections import Counter

        counts = Counter(p for p in self.parents if p >= 0)
        return sum(1 for _, n in counts.items() if n > 1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotate_towards(rng, direction: np.ndarray, angle: float) -> np.ndarray:
    """Rotate by `angle` around a random axis orthogonal to `direction`."""
    probe = rng.normal(size=3)
    axis = probe - probe.dot(direction) * direction
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        axis = np.array([direction[1], -direction[0], 0.0])
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            axis = np.array([0.0, 1.0, 0.0])
            norm = 1.0
    axis = axis / norm
    return _unit(direction * np.cos(angle) + np.cross(axis, direction) * np.sin(angle))


def generate_vessel_tree(seed, params: GenParams) -> VesselTree:
    """Grow one tree by a branching random walk; pure function of (seed, params)."""
    rng = np.random.default_rng(seed)
    dims = np.array(params.grid, dtype=np.float64)
    lo, hi = 1.0, dims - 2.0

    tree = VesselTree()
    start = lo + rng.random(3) * (hi - lo) * np.array([0.3, 0.8, 0.8]) + 0.0
    direction = _unit(rng.normal(size=3))
    # (point, direction, radius, depth, parent segment, remaining steps)
    stack = [(start, direction, float(params.root_radius), 0, -1, params.max_steps)]
    while stack:
        point, direction, radius, depth, parent, steps = stack.pop()
        if steps <= 0 or radius < params.min_radius:
            continue
        end = point + direction * params.step_length
        clipped = np.clip(end, lo, hi)
        hit_wall = not np.allclose(clipped, end)
        end = clipped
        tree.segments.append(Segment(point.copy(), end.copy(), radius, radius))
        tree.parents.append(parent)
        tree.depths.append(depth)
        idx = len(tree.segments) - 1
        if hit_wall:
            continue
        if rng.random() < params.branch_prob:
            child_r = radius * params.radius_decay
            for _ in range(2):
                angle = rng.uniform(params.angle_min, params.angle_max)
                child_dir = _rotate_towards(rng, direction, angle)
                stack.append((end, child_dir, child_r, depth + 1, idx, steps - 1))
        else:
            wobbled = _rotate_towards(rng, direction, rng.uniform(0, params.direction_wobble))
            stack.append((end, wobbled, radius, depth, idx, steps - 1))
    return tree


def voxelize_tree(tree: VesselTree, dims) -> np.ndarray:
    """Label a voxel 1 iff its center lies within a segment's swept radius.

    Exact capsule test: distance from the voxel center to the closest point
    of the segment, compared against the radius interpolated at that point.
    """
    label = np.zeros(tuple(dims), dtype=np.uint8)
    for seg in tree.segments:
        _stamp_capsule(label, seg)
    return label


def _stamp_capsule(label: np.ndarray, seg: Segment) -> None:
    dims = label.shape
    rmax = max(seg.r_start, seg.r_end)
    lo = np.floor(np.minimum(seg.start, seg.end) - rmax).astype(int)
    hi = np.ceil(np.maximum(seg.start, seg.end) + rmax).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(dims) - 1)
    if (lo > hi).any():
        return
    zz, yy, xx = np.meshgrid(
        np.arange(lo[0], hi[0] + 1),
        np.arange(lo[1], hi[1] + 1),
        np.arange(lo[2], hi[2] + 1),
        indexing="ij",
    )
    pts = np.stack([zz, yy, xx], axis=-1).astype(np.float64)
    d = seg.end - seg.start
    dd = float(d.dot(d))
    if dd == 0.0:
        t = np.zeros(pts.shape[:-1])
    else:
        t = np.clip(((pts - seg.start) @ d) / dd, 0.0, 1.0)
    closest = seg.start + t[..., None] * d
    dist_sq = ((pts - closest) ** 2).sum(axis=-1)
    r_t = seg.r_start + t * (seg.r_end - seg.r_start)
    inside = dist_sq <= r_t * r_t
    label[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] |= inside.astype(np.uint8)


def render_intensity(label: np.ndarray, params: GenParams, seed) -> np.ndarray:
    """Two-level image, separable Gaussian blur, seeded additive noise, clip."""
    image = params.fg_mean * label.astype(np.float64) + params.bg_mean * (1.0 - label)
    if params.blur_radius > 0:
        image = gaussian_filter(image, sigma=params.blur_radius, mode="nearest")
    if params.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


@dataclass
class LabeledVolume:
    """Paired intensity and binary label volumes with physical spacing."""

    image: np.ndarray
    label: np.ndarray
    spacing: tuple[float, float, float]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.image.shape != self.label.shape:
            raise ConfigError(
                f"image/label shape mismatch: {self.image.shape} vs {self.label.shape}"
            )
        if self.label.size and int(self.label.max()) > 1:
            raise ConfigError("label volume must be binary")
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be positive, got {self.spacing}")


def _seed_key(seed) -> list[int]:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def generate_labeled_volume(seed, params: GenParams) -> LabeledVolume:
    """Union of tree_count trees, voxelized and rendered; deterministic per seed."""
    key = _seed_key(seed)
    label = np.zeros(params.grid, dtype=np.uint8)
    for t in range(params.tree_count):
        tree = generate_vessel_tree(key + [t], params)
        label |= voxelize_tree(tree, params.grid)
    image = render_intensity(label, params, key + [7919])
    meta = {"seed": ",".join(str(s) for s in key), **asdict(params)}
    return LabeledVolume(image, label, params.spacing, meta)


# ---------------------------------------------------------------------------
# VVOL container


def write_vvol(path, array: np.ndarray, spacing, dtype_code: int) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ConfigError(f"vvol stores rank-3 volumes, got rank {array.ndim}")
    if dtype_code == DTYPE_IMAGE:
        payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    elif dtype_code == DTYPE_LABEL:
        payload = np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    else:
        raise ConfigError(f"unknown vvol dtype code {dtype_code}")
    header = _HEADER.pack(
        VVOL_MAGIC, VVOL_VERSION, dtype_code, *array.shape, *[float(s) for s in spacing]
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_vvol(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FileFormatError("truncated vvol header", len(header))
        magic, version, dtype_code, d, h, w, sd, sh, sw = _HEADER.unpack(header)
        if magic != VVOL_MAGIC:
            raise FileFormatError(f"bad vvol magic {magic!r}", 0)
        if version != VVOL_VERSION:
            raise FileFormatError(f"unsupported vvol version {version}", 4)
        if dtype_code not in (DTYPE_IMAGE, DTYPE_LABEL):
            raise FileFormatError(f"unknown vvol dtype code {dtype_code}", 5)
        n = int(d) * int(h) * int(w)
        if n <= 0 or n > _MAX_VOXELS:
            raise FileFormatError(f"dim overflow: {d}x{h}x{w}", 6)
        item = 8 if dtype_code == DTYPE_IMAGE else 1
        payload = fh.read(n * item + 1)
        if len(payload) != n * item:
            raise FileFormatError(
                f"payload length {len(payload)} does not match dims {d}x{h}x{w}",
                _HEADER.size + min(len(payload), n * item),
            )
    dtype = "<f8" if dtype_code == DTYPE_IMAGE else np.uint8
    array = np.frombuffer(payload[: n * item], dtype=dtype).reshape(d, h, w).copy()
    return array, (sd, sh, sw)


def _meta_to_text(meta: dict) -> str:
    lines = []
    for key, value in meta.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _meta_from_text(text: str) -> dict:
    meta = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def write_volume(stem, vol: LabeledVolume) -> None:
    """Write <stem>.img.vvol, <stem>.lbl.vvol and <stem>.meta."""
    stem = str(stem)
    write_vvol(stem + ".img.vvol", vol.image, vol.spacing, DTYPE_IMAGE)
    write_vvol(stem + ".lbl.vvol", vol.label, vol.spacing, DTYPE_LABEL)
    Path(stem + ".meta").write_text(_meta_to_text(vol.meta), encoding="utf-8")


def read_volume(stem) -> LabeledVolume:
    stem = str(stem)
    image, spacing = read_vvol(stem + ".img.vvol")
    label, spacing_l = read_vvol(stem + ".lbl.vvol")
    if not np.allclose(spacing, spacing_l):
        raise FileFormatError(f"image/label spacing disagree for {stem}", _HEADER.size)
    meta_path = Path(stem + ".meta")
    meta = _meta_from_text(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return LabeledVolume(image, label, spacing, meta)


def write_manifest(path, train_stems, test_stems) -> None:
    lines = ["split: train", *train_stems, "split: test", *test_stems]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, list[str]]:
    splits: dict[str, list[str]] = {"train": [], "test": []}
    current = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("split:"):
            current = line.split(":", 1)[1].strip()
            if current not in splits:
                raise ConfigError(f"unknown split '{current}' in manifest")
        elif current is None:
            raise ConfigError("manifest entries must follow a 'split:' header")
        else:
            splits[current].append(line)
    return splits


def generate_dataset(out_dir, n_train: int, n_test: int, params: GenParams, seed: int) -> Path:
    """Write n_train + n_test volumes plus a manifest; idempotent for a fixed seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_stems, test_stems = [], []
    for i in range(n_train + n_test):
        name = f"train_{i:03d}" if i < n_train else f"test_{i - n_train:03d}"
        vol = generate_labeled_volume([seed, i], params)
        write_volume(out / name, vol)
        (train_stems if i < n_train else test_stems).append(name)
    manifest = out / "manifest.txt"
    write_manifest(manifest, train_stems, test_stems)
    return manifest


def load_split(manifest_path, split: str) -> list[LabeledVolume]:
    manifest_path = Path(manifest_path)
    stems = read_manifest(manifest_path)[split]
    return [read_volume(manifest_path.parent / stem) for stem in stems]


# ---------------------------------------------------------------------------
# patch sampling


def sample_patch_corner(vol: LabeledVolume, patch_dims, rng, fg_bias: float):
    """Corner of a patch window, foreground-centered with probability fg_bias."""
    dims = vol.label.shape
    patch = tuple(patch_dims)
    for i in range(3):
        if patch[i] > dims[i]:
            raise ConfigError(
                f"patch {patch} larger than volume {dims}; pad the volume first"
            )
    fg = np.flatnonzero(vol.label.reshape(-1))
    if rng.random() < fg_bias and fg.size:
        flat = int(fg[rng.integers(fg.size)])
        center = np.array(np.unravel_index(flat, dims))
    else:
        center = np.array([rng.integers(d) for d in dims])
    corner = np.clip(center - np.array(patch) // 2, 0, np.array(dims) - np.array(patch))
    return tuple(int(c) for c in corner)


def sample_patch(vol: LabeledVolume, patch_dims, rng, fg_bias: float, augment: bool = False):
    """Image/label patch pair; optional seeded axis flips."""
    corner = sample_patch_corner(vol, patch_dims, rng, fg_bias)
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_dims))
    img = vol.image[sl].copy()
    lbl = vol.label[sl].copy()
    if augment:
        for axis in range(3):
            if rng.random() < 0.5:
                img = np.flip(img, axis=axis)
                lbl = np.flip(lbl, axis=axis)
        img = np.ascontiguousarray(img)
        lbl = np.ascontiguousarray(lbl)
    return img, lbl
