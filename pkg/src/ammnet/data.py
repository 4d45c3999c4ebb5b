"""Synthetic RGB-DSM scenes, geometric augmentation, and raster I/O.

Scenes are built so that height is the only reliable cue for two class
pairs: low vegetation and trees share the same green texture but sit in
different height bands, and gray rooftops look like the road surface.  An
optional RGB-only occlusion pass darkens or fogs patches of the image
without touching DSM or labels.

Class ids follow the ISPRS convention used by the model and metrics:
0 impervious, 1 building, 2 low vegetation, 3 tree, 4 car, 5 clutter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError

CLASS_NAMES = ("impervious", "building", "low_vegetation", "tree", "car", "clutter")
CLUTTER = 5
IGNORE = 255
# pre-noise height bands in metres
CLASS_BANDS = {0: (0.0, 0.0), 1: (8.0, 25.0), 2: (0.0, 0.5), 3: (3.0, 10.0), 4: (1.0, 2.0), 5: (0.0, 3.0)}
DSM_NOISE = 0.2

_GREEN = np.array([72.0, 128.0, 60.0])
_ROAD = np.array([128.0, 128.0, 132.0])
_ROOFS = np.array([[132.0, 128.0, 130.0], [168.0, 84.0, 72.0]])
_CARS = np.array([[200.0, 30.0, 30.0], [30.0, 60.0, 190.0], [230.0, 230.0, 230.0], [25.0, 25.0, 25.0]])

DTYPE_CODES = {np.dtype(np.uint8): 0, np.dtype(np.float32): 1}
CODE_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}


@dataclass
class Raster:
    """Channel-first image plane: ``data`` is C×H×W, uint8 or float32."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise FormatError(f"raster must be C×H×W, got shape {self.data.shape}")
        if self.data.dtype not in DTYPE_CODES:
            raise FormatError(f"raster dtype must be uint8 or float32, got {self.data.dtype}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class Scene:
    rgb: Raster
    dsm: Raster
    labels: Raster


@dataclass
class GenSpec:
    size: int = 64
    n_buildings: tuple[int, int] = (1, 3)
    n_trees: tuple[int, int] = (2, 5)
    n_lowveg: tuple[int, int] = (1, 3)
    n_cars: tuple[int, int] = (1, 3)
    n_clutter: tuple[int, int] = (0, 1)
    building_side: tuple[int, int] = (10, 22)
    tree_radius: tuple[int, int] = (4, 8)
    lowveg_radius: tuple[int, int] = (7, 14)
    car_len: tuple[int, int] = (7, 10)
    occlusion_rate: float = 0.0
    dsm_noise: float = DSM_NOISE
    seed: int = 0

    def validate(self) -> "GenSpec":
        if self.size <= 0 or self.size % 32:
            raise GenerationError(f"scene size {self.size} must be a positive multiple of 32")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise GenerationError(f"occlusion_rate {self.occlusion_rate} outside [0, 1]")
        for name in ("n_buildings", "n_trees", "n_lowveg", "n_cars", "n_clutter"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise GenerationError(f"{name} range {lo, hi} is invalid")
        largest = max(self.building_side[1], 2 * self.tree_radius[1] + 1, 2 * self.lowveg_radius[1] + 1, self.car_len[1])
        if largest > self.size:
            raise GenerationError(f"objects up to {largest} px do not fit a {self.size} px scene")
        return self


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------
def _disc(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _paint(rgb_mean, mask, color):
    rgb_mean[:, mask] = color[:, None]


def generate(spec: GenSpec) -> Scene:
    """Deterministic scene for ``spec``; occlusion never alters DSM or labels."""
    spec.validate()
    S = spec.size
    rng = np.random.default_rng([spec.seed, 0])
    labels = np.zeros((S, S), dtype=np.uint8)
    height = np.zeros((S, S), dtype=np.float64)
    color = np.empty((3, S, S))
    color[:] = _ROAD[:, None, None]

    def count(r):
        return int(rng.integers(r[0], r[1] + 1))

    for _ in range(count(spec.n_lowveg)):
        r = rng.uniform(*spec.lowveg_radius)
        m = _disc(S, rng.uniform(0, S), rng.uniform(0, S), r)
        labels[m] = 2
        height[m] = rng.uniform(*CLASS_BANDS[2], size=int(m.sum()))
        _paint(color, m, _GREEN)

    for _ in range(count(spec.n_buildings)):
        h, w = rng.integers(spec.building_side[0], spec.building_side[1] + 1, size=2)
        y, x = rng.integers(0, S - h + 1), rng.integers(0, S - w + 1)
        m = np.zeros((S, S), dtype=bool)
        m[y : y + h, x : x + w] = True
        labels[m] = 1
        height[m] = rng.uniform(*CLASS_BANDS[1])
        _paint(color, m, _ROOFS[rng.integers(len(_ROOFS))])

    lo, hi = CLASS_BANDS[3]
    for _ in range(count(spec.n_trees)):
        r = rng.uniform(*spec.tree_radius)
        cy, cx = rng.uniform(0, S), rng.uniform(0, S)
        m = _disc(S, cy, cx, r)
        yy, xx = np.nonzero(m)
        top = rng.uniform(6.0, 9.5)
        crown = top - 2.5 * ((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r) + rng.uniform(-0.8, 0.8, size=yy.size)
        labels[m] = 3
        height[m] = np.clip(crown, lo, hi)
        _paint(color, m, _GREEN)

    for _ in range(count(spec.n_clutter)):
        h, w = rng.integers(3, 7, size=2)
        y, x = rng.integers(0, S - h + 1), rng.integers(0, S - w + 1)
        labels[y : y + h, x : x + w] = CLUTTER
        height[y : y + h, x : x + w] = rng.uniform(*CLASS_BANDS[5])
        color[:, y : y + h, x : x + w] = rng.uniform(40, 220, size=3)[:, None, None]

    for _ in range(count(spec.n_cars)):
        ln = int(rng.integers(spec.car_len[0], spec.car_len[1] + 1))
        wd = max(3, ln // 2)
        h, w = (ln, wd) if rng.random() < 0.5 else (wd, ln)
        best = None
        for _attempt in range(30):
            y, x = int(rng.integers(0, S - h + 1)), int(rng.integers(0, S - w + 1))
            best = (y, x)
            if (labels[y : y + h, x : x + w] == 0).all():
                break
        y, x = best
        labels[y : y + h, x : x + w] = 4
        height[y : y + h, x : x + w] = rng.uniform(*CLASS_BANDS[4])
        color[:, y : y + h, x : x + w] = _CARS[rng.integers(len(_CARS))][:, None, None]

    rgb = color + rng.normal(0.0, 10.0, size=color.shape)
    # truncated at 3 sigma so every pixel stays within its band plus 3 sigma
    dsm = height + spec.dsm_noise * np.clip(rng.standard_normal(height.shape), -3.0, 3.0)

    if spec.occlusion_rate > 0:
        rgb = apply_occlusion(rgb, spec.occlusion_rate, np.random.default_rng([spec.seed, 1]))

    return Scene(
        Raster(np.clip(np.rint(rgb), 0, 255).astype(np.uint8)),
        Raster(dsm.astype(np.float32)[None]),
        Raster(labels[None]),
    )


def occlusion_mask(size: int, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Boolean coverage mask reaching at least ``rate`` and a per-pixel fog flag."""
    covered = np.zeros((size, size), dtype=bool)
    fog = np.zeros((size, size), dtype=bool)
    target = rate * size * size
    while covered.sum() < target:
        h, w = rng.integers(size // 6, size // 2 + 1, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        covered[y : y + h, x : x + w] = True
        fog[y : y + h, x : x + w] = rng.random() < 0.5
    return covered, fog


def apply_occlusion(rgb: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    covered, fog = occlusion_mask(rgb.shape[-1], rate, rng)
    out = rgb.copy()
    dark = covered & ~fog
    haze = covered & fog
    out[:, dark] *= 0.3
    out[:, haze] = 0.3 * out[:, haze] + 0.7 * 205.0
    return out


def band_violations(scene: Scene, tol: float = 0.0) -> int:
    """Number of labeled pixels whose height lies outside its class band by more than ``tol``."""
    lab = scene.labels.data[0]
    h = scene.dsm.data[0].astype(np.float64)
    bad = 0
    for cls, (lo, hi) in CLASS_BANDS.items():
        m = lab == cls
        bad += int(((h[m] < lo - tol) | (h[m] > hi + tol)).sum())
    return bad


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------
def hflip(a: np.ndarray) -> np.ndarray:
    return a[..., :, ::-1].copy()


def vflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1, :].copy()


def rot90(a: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(a, k, axes=(-2, -1)).copy()


def resize_crop(a: np.ndarray, scale: float, oy: int, ox: int, size: int) -> np.ndarray:
    """Nearest-neighbour zoom by ``scale`` followed by a ``size`` crop at (oy, ox)."""
    H, W = a.shape[-2:]
    rows = np.minimum(((np.arange(size) + oy) / scale).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(size) + ox) / scale).astype(np.int64), W - 1)
    return a[..., rows[:, None], cols[None, :]].copy()


def augment(scene: Scene, seed, max_scale: float = 1.25) -> Scene:
    """Random zoom-and-crop, flips and right-angle rotation, applied identically
    to RGB, DSM and labels with nearest-neighbour sampling."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays = [scene.rgb.data, scene.dsm.data, scene.labels.data]
    size = scene.labels.height
    scale = rng.uniform(1.0, max_scale)
    span = int(np.floor(size * scale)) - size
    oy, ox = (int(v) for v in rng.integers(0, span + 1, size=2))
    flip_h, flip_v = rng.random(2) < 0.5
    k = int(rng.integers(4))
    out = []
    for a in arrays:
        a = resize_crop(a, scale, oy, ox, size)
        if flip_h:
            a = hflip(a)
        if flip_v:
            a = vflip(a)
        out.append(rot90(a, k))
    return Scene(Raster(out[0]), Raster(out[1]), Raster(out[2]))


# ---------------------------------------------------------------------------
# raster container
# ---------------------------------------------------------------------------
RASTER_MAGIC = b"AMRD"
RASTER_VERSION = 1
_HEADER = struct.Struct("<4sBBBII")


def encode_raster(r: Raster) -> bytes:
    code = DTYPE_CODES[r.data.dtype]
    header = _HEADER.pack(RASTER_MAGIC, RASTER_VERSION, code, r.channels, r.height, r.width)
    return header + np.ascontiguousarray(r.data, dtype=CODE_DTYPES[code]).tobytes()


def decode_raster(buf: bytes) -> Raster:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated raster header: expected {_HEADER.size} bytes, got {len(buf)}", len(buf))
    magic, version, code, ch, h, w = _HEADER.unpack_from(buf)
    if magic != RASTER_MAGIC:
        raise FormatError(f"bad raster magic {magic!r}", 0)
    if version != RASTER_VERSION:
        raise FormatError(f"unsupported raster version {version}", 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown raster dtype code {code}", 5)
    dt = CODE_DTYPES[code]
    expected = ch * h * w * dt.itemsize
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"raster payload length mismatch: expected {expected} bytes, got {actual}", _HEADER.size + min(actual, expected)
        )
    data = np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(ch, h, w)
    return Raster(data.astype(dt.newbyteorder("=")))


def write_raster(path, r: Raster) -> None:
    Path(path).write_bytes(encode_raster(r))


def read_raster(path) -> Raster:
    return decode_raster(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------
SPLITS = ("train", "val", "test")


@dataclass
class SplitArrays:
    ids: list[str]
    rgb: np.ndarray  # N×3×H×W uint8
    dsm: np.ndarray  # N×1×H×W float32
    labels: np.ndarray  # N×H×W uint8

    def __len__(self) -> int:
        return len(self.ids)

    def scene(self, i: int) -> Scene:
        return Scene(Raster(self.rgb[i]), Raster(self.dsm[i]), Raster(self.labels[i][None]))


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def split_counts(count: int, fractions=(0.7, 0.15, 0.15)) -> dict[str, int]:
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    return {"train": n_train, "val": n_val, "test": count - n_train - n_val}


def write_dataset(root, count: int, spec: GenSpec, seed: int, fractions=(0.7, 0.15, 0.15)) -> dict[str, np.ndarray]:
    """Generate ``count`` scenes into ``root/{split}/`` and return per-split class histograms."""
    root = Path(root)
    counts = split_counts(count, fractions)
    hist = {}
    idx = 0
    for split in SPLITS:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        ids = []
        h = np.zeros(len(CLASS_NAMES), dtype=np.int64)
        for _ in range(counts[split]):
            sid = f"scene_{idx:04d}"
            scene = generate(replace(spec, seed=scene_seed(seed, idx)))
            write_raster(d / f"{sid}.rgb.amrd", scene.rgb)
            write_raster(d / f"{sid}.dsm.amrd", scene.dsm)
            write_raster(d / f"{sid}.lbl.amrd", scene.labels)
            h += np.bincount(scene.labels.data.ravel(), minlength=len(CLASS_NAMES))[: len(CLASS_NAMES)]
            ids.append(sid)
            idx += 1
        (d / "manifest.txt").write_text("".join(f"{i}\n" for i in ids))
        hist[split] = h
    return hist


def load_split(root, split: str) -> SplitArrays:
    d = Path(root) / split
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"missing manifest {manifest}")
    ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    rgb, dsm, lab = [], [], []
    for sid in ids:
        rgb.append(read_raster(d / f"{sid}.rgb.amrd").data)
        dsm.append(read_raster(d / f"{sid}.dsm.amrd").data)
        lab.append(read_raster(d / f"{sid}.lbl.amrd").data[0])
    if not ids:
        return SplitArrays([], np.zeros((0, 3, 0, 0), np.uint8), np.zeros((0, 1, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8))
    return SplitArrays(ids, np.stack(rgb), np.stack(dsm), np.stack(lab))


# ---------------------------------------------------------------------------
# model-input preparation
# ---------------------------------------------------------------------------
def normalize_rgb(rgb: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (rgb.astype(np.float64) / 255.0).astype(dtype)


DSM_SCALE = 10.0


def standardize_dsm(dsm: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Heights relative to the per-tile median (ground level), in units of ``DSM_SCALE`` metres."""
    d = dsm.astype(np.float64)
    ground = np.median(d, axis=(-2, -1), keepdims=True)
    return ((d - ground) / DSM_SCALE).astype(dtype)


def prepare_labels(labels: np.ndarray, ignore_classes=(CLUTTER,)) -> np.ndarray:
    out = labels.astype(np.int64)
    for c in ignore_classes:
        out[labels == c] = IGNORE
    return out
