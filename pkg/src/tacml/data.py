"""Synthetic datasets, transform pairs, augmentation, and on-disk formats.

Images are ``(C, H, W)`` float64 arrays with values in [0, 1].  Each class
gets a procedural texture prototype (band-limited noise plus a class-unique
motif); instances are integer-translated, noise-perturbed copies of the
prototype with the translation recorded per image.  Train and test splits
use disjoint class sets.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import CropTooLarge, FormatError, InvalidShape, SeparabilityError

TENSOR_MAGIC = b"TACT"
TENSOR_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_OF_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


def save_tensor(path, arr: np.ndarray) -> None:
    """Write an array in the package tensor format (bit-exact round trip)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_OF_DTYPE:
        raise FormatError(f"unsupported dtype {arr.dtype}; use f32, f64, or u8")
    code = _CODE_OF_DTYPE[arr.dtype]
    header = struct.pack("<4sHBB", TENSOR_MAGIC, TENSOR_VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")
    Path(path).write_bytes(header + dims + payload)


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError("truncated tensor file: missing header")
    magic, version, code, ndim = struct.unpack("<4sHBB", raw[:8])
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    if len(raw) < 8 + 4 * ndim:
        raise FormatError("truncated tensor file: missing dims")
    dims = struct.unpack(f"<{ndim}I", raw[8 : 8 + 4 * ndim])
    dtype = _DTYPE_CODES[code]
    expected = 8 + 4 * ndim + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload size mismatch: got {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw[8 + 4 * ndim :], dtype=dtype).reshape(dims).copy()


@dataclass(frozen=True)
class GenerateConfig:
    """Knobs for the synthetic texture dataset.

    ``classes`` counts all classes; the first half become training classes
    and the second half test classes.  ``texture_scale`` is the coarse-noise
    cell count per axis, ``jitter_px`` the per-instance integer translation
    bound.
    """

    name: str = "synthetic"
    classes: int = 20
    per_class: int = 50
    shape: tuple[int, int, int] = (3, 32, 32)
    texture_scale: int = 6
    noise_sigma: float = 0.02
    jitter_px: int = 2

    def to_json(self) -> dict:
        d = self.__dict__.copy()
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "GenerateConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InvalidShape(f"unknown generator config keys: {sorted(unknown)}")
        obj = dict(obj)
        if "shape" in obj:
            obj["shape"] = tuple(obj["shape"])
        return cls(**obj)


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    per_class: int
    image_shape: tuple[int, int, int]
    seed: int
    train_ids: list[str]
    test_ids: list[str]
    class_of: dict[str, int]
    jitter_of: dict[str, dict] = field(default_factory=dict)
    nn_separability: float | None = None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "per_class": self.per_class,
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            "split": {"train": self.train_ids, "test": self.test_ids},
            "class_of": self.class_of,
            "jitter_of": self.jitter_of,
            "nn_separability": self.nn_separability,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(
            name=obj["name"],
            num_classes=obj["num_classes"],
            per_class=obj["per_class"],
            image_shape=tuple(obj["image_shape"]),
            seed=obj["seed"],
            train_ids=list(obj["split"]["train"]),
            test_ids=list(obj["split"]["test"]),
            class_of={k: int(v) for k, v in obj["class_of"].items()},
            jitter_of=obj.get("jitter_of", {}),
            nn_separability=obj.get("nn_separability"),
        )

    def train_classes(self) -> set[int]:
        return {self.class_of[i] for i in self.train_ids}

    def test_classes(self) -> set[int]:
        return {self.class_of[i] for i in self.test_ids}


class Dataset:
    """Manifest plus eagerly loaded images keyed by id."""

    def __init__(self, manifest: DatasetManifest, images: dict[str, np.ndarray]):
        self.manifest = manifest
        self.images = images

    def image(self, image_id: str) -> np.ndarray:
        return self.images[image_id]

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        manifest = DatasetManifest.from_json(
            json.loads((root / "manifest.json").read_text())
        )
        images = {
            i: load_tensor(root / "images" / f"{i}.tact")
            for i in manifest.train_ids + manifest.test_ids
        }
        return cls(manifest, images)


def _upsample_bilinear(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear upsample of a small 2-D grid onto an h x w grid."""
    ch, cw = coarse.shape
    v = np.linspace(0, ch - 1, h)
    u = np.linspace(0, cw - 1, w)
    uu, vv = np.meshgrid(u, v)
    vals, _ = geometry.bilinear_sample(coarse, uu.ravel(), vv.ravel())
    return vals.reshape(h, w)


def _class_prototype(rng: np.random.Generator, cfg: GenerateConfig) -> np.ndarray:
    c, h, w = cfg.shape
    scale = max(2, cfg.texture_scale)
    img = np.empty((c, h, w))
    for ch in range(c):
        img[ch] = _upsample_bilinear(rng.standard_normal((scale, scale)), h, w)
    # class-unique motif: two rectangles at class-specific positions
    for _ in range(2):
        mh = int(rng.integers(h // 8, h // 3 + 1))
        mw = int(rng.integers(w // 8, w // 3 + 1))
        y0 = int(rng.integers(0, h - mh + 1))
        x0 = int(rng.integers(0, w - mw + 1))
        img[:, y0 : y0 + mh, x0 : x0 + mw] += rng.uniform(-2.5, 2.5, size=(c, 1, 1))
    lo, hi = img.min(), img.max()
    span = max(hi - lo, 1e-9)
    return 0.1 + 0.8 * (img - lo) / span


def warp_image(x: np.ndarray, t: geometry.TransformSpec) -> np.ndarray:
    """Warp every channel by ``t``; out-of-bounds samples are filled with 0."""
    c, h, w = x.shape
    out = np.empty_like(x)
    for ch in range(c):
        out[ch], _ = geometry.warp_map(x[ch], t, h, w)
    return out


def generate(cfg: GenerateConfig, seed: int, out_dir) -> Dataset:
    """Generate and write a dataset; deterministic per seed.

    Writes ``manifest.json`` and one tensor file per image id under
    ``images/``.  Raises SeparabilityError if a pixel-space nearest-neighbour
    classifier cannot reach 0.8 accuracy at low noise.
    """
    c, h, w = cfg.shape
    if cfg.classes < 2 or cfg.per_class < 2:
        raise InvalidShape("need classes >= 2 and per_class >= 2")
    if h < 16 or w < 16 or h % 4 or w % 4:
        raise InvalidShape("H and W must be >= 16 and divisible by 4")

    root = np.random.SeedSequence(seed)
    class_seeds = root.spawn(cfg.classes)
    ids, class_of, jitter_of, images = [], {}, {}, {}
    for cls in range(cfg.classes):
        proto_ss, inst_ss = class_seeds[cls].spawn(2)
        proto = _class_prototype(np.random.default_rng(proto_ss), cfg)
        inst_seeds = inst_ss.spawn(cfg.per_class)
        for inst in range(cfg.per_class):
            rng = np.random.default_rng(inst_seeds[inst])
            dx = int(rng.integers(-cfg.jitter_px, cfg.jitter_px + 1))
            dy = int(rng.integers(-cfg.jitter_px, cfg.jitter_px + 1))
            t = geometry.Perspective(h=(1, 0, dx, 0, 1, dy, 0, 0, 1))
            img = warp_image(proto, t)
            if cfg.noise_sigma > 0:
                img = np.clip(img + cfg.noise_sigma * rng.standard_normal(img.shape), 0, 1)
            image_id = f"img_{cls * cfg.per_class + inst:05d}"
            ids.append(image_id)
            class_of[image_id] = cls
            jitter_of[image_id] = geometry.transform_to_json(t)
            images[image_id] = img

    n_train_cls = (cfg.classes + 1) // 2
    train_ids = [i for i in ids if class_of[i] < n_train_cls]
    test_ids = [i for i in ids if class_of[i] >= n_train_cls]
    manifest = DatasetManifest(
        name=cfg.name,
        num_classes=cfg.classes,
        per_class=cfg.per_class,
        image_shape=cfg.shape,
        seed=seed,
        train_ids=train_ids,
        test_ids=test_ids,
        class_of=class_of,
        jitter_of=jitter_of,
    )
    manifest.nn_separability = _nn_accuracy(images, class_of, ids)
    if cfg.noise_sigma <= 0.05 and manifest.nn_separability < 0.8:
        raise SeparabilityError(
            f"pixel 1-NN accuracy {manifest.nn_separability:.3f} < 0.8"
        )

    root_dir = Path(out_dir)
    (root_dir / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in images.items():
        save_tensor(root_dir / "images" / f"{image_id}.tact", img)
    (root_dir / "manifest.json").write_text(
        json.dumps(manifest.to_json(), indent=1, sort_keys=True)
    )
    return Dataset(manifest, images)


def _nn_accuracy(images, class_of, ids, cap: int = 600) -> float:
    """Leave-one-out 1-NN accuracy on raw pixels, subsampled to ``cap`` ids."""
    use = ids if len(ids) <= cap else ids[:: max(1, len(ids) // cap)][:cap]
    x = np.stack([images[i].ravel() for i in use])
    labels = np.array([class_of[i] for i in use])
    sq = (x**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)
    nearest = d2.argmin(axis=1)
    return float((labels[nearest] == labels).mean())


def make_pair(
    x: np.ndarray, family: geometry.TransformFamily, seed_or_rng
) -> tuple[np.ndarray, geometry.TransformSpec]:
    """Sample a transform from the family and warp ``x`` by it."""
    t = geometry.sample_transform(family, seed_or_rng)
    if isinstance(t, geometry.Identity):
        return x.copy(), t
    return warp_image(x, t), t


def augment(x: np.ndarray, crop_h: int, crop_w: int, seed_or_rng) -> np.ndarray:
    """Training augmentation: random crop plus Bernoulli(0.5) horizontal flip."""
    rng = geometry._as_rng(seed_or_rng)
    _, h, w = x.shape
    if crop_h > h or crop_w > w:
        raise CropTooLarge(f"crop {crop_h}x{crop_w} exceeds image {h}x{w}")
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    out = x[:, y0 : y0 + crop_h, x0 : x0 + crop_w]
    if rng.integers(2):
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def center_crop(x: np.ndarray, crop_h: int, crop_w: int) -> np.ndarray:
    """Deterministic test-time crop."""
    _, h, w = x.shape
    if crop_h > h or crop_w > w:
        raise CropTooLarge(f"crop {crop_h}x{crop_w} exceeds image {h}x{w}")
    y0 = (h - crop_h) // 2
    x0 = (w - crop_w) // 2
    return np.ascontiguousarray(x[:, y0 : y0 + crop_h, x0 : x0 + crop_w])
