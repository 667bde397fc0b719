"""Transform algebra on 2-D coordinates and attention-map grids.

Conventions, fixed once for the whole package:

* a point is ``(u, v)`` = (column, row), origin at the top-left,
  pixel centers at integer coordinates;
* grids are 2-D float64 arrays indexed ``grid[v, u]``;
* every transform reduces to a normalized 3x3 homography acting on
  homogeneous ``[u, v, 1]`` columns.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegeneratePoint,
    EmptyFamily,
    EmptyKeypoints,
    NonInvertible,
    ValidationError,
)

Point2 = tuple[float, float]

_DET_TOL = 1e-9
_DEN_TOL = 1e-12


@dataclass(frozen=True)
class Identity:
    kind: str = "identity"


@dataclass(frozen=True)
class CropResize:
    """Crop box ``(x0, y0, w, h)`` in source pixels mapped onto an
    ``out_w`` x ``out_h`` output frame."""

    x0: float
    y0: float
    w: float
    h: float
    out_w: float
    out_h: float
    kind: str = "crop_resize"

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0 and self.out_w > 0 and self.out_h > 0):
            raise ValidationError("CropResize requires positive w, h, out_w, out_h")


@dataclass(frozen=True)
class Rotate:
    """Counter-clockwise rotation by ``theta`` radians about ``center``."""

    theta: float
    center: Point2
    kind: str = "rotate"


@dataclass(frozen=True)
class Zoom:
    """Scaling by ``scale`` about ``center`` (scale > 1 magnifies)."""

    scale: float
    center: Point2
    kind: str = "zoom"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("Zoom requires scale > 0")


@dataclass(frozen=True)
class Perspective:
    """General homography with 9 row-major coefficients, normalized h[8] = 1."""

    h: tuple[float, ...]
    kind: str = "perspective"

    def __post_init__(self):
        if len(self.h) != 9:
            raise ValidationError("Perspective requires 9 coefficients")
        if abs(self.h[8] - 1.0) > 1e-12:
            if abs(self.h[8]) < _DEN_TOL:
                raise NonInvertible("homography cannot be normalized: h[8] ~ 0")
            object.__setattr__(self, "h", tuple(c / self.h[8] for c in self.h))
        if abs(np.linalg.det(self.matrix())) <= _DET_TOL:
            raise NonInvertible("homography matrix is singular")

    def matrix(self) -> np.ndarray:
        return np.array(self.h, dtype=np.float64).reshape(3, 3)


TransformSpec = Union[Identity, CropResize, Rotate, Zoom, Perspective]


def to_homography(t: TransformSpec) -> np.ndarray:
    """3x3 matrix H with ``[u', v', w]^T = H [u, v, 1]^T`` and p' = (u'/w, v'/w)."""
    if isinstance(t, Identity):
        return np.eye(3)
    if isinstance(t, CropResize):
        su, sv = t.out_w / t.w, t.out_h / t.h
        return np.array(
            [[su, 0.0, -su * t.x0], [0.0, sv, -sv * t.y0], [0.0, 0.0, 1.0]]
        )
    if isinstance(t, Rotate):
        c, s = math.cos(t.theta), math.sin(t.theta)
        cu, cv = t.center
        return np.array(
            [
                [c, -s, cu - c * cu + s * cv],
                [s, c, cv - s * cu - c * cv],
                [0.0, 0.0, 1.0],
            ]
        )
    if isinstance(t, Zoom):
        cu, cv = t.center
        k = t.scale
        return np.array(
            [[k, 0.0, cu * (1 - k)], [0.0, k, cv * (1 - k)], [0.0, 0.0, 1.0]]
        )
    if isinstance(t, Perspective):
        return t.matrix()
    raise TypeError(f"not a TransformSpec: {t!r}")


def from_homography(mat: np.ndarray) -> Perspective:
    """Normalize a 3x3 matrix into a Perspective spec (h[8] = 1)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape != (3, 3):
        raise ValidationError("homography must be 3x3")
    if abs(mat[2, 2]) < _DEN_TOL:
        raise NonInvertible("homography cannot be normalized: h[8] ~ 0")
    return Perspective(h=tuple((mat / mat[2, 2]).ravel().tolist()))


def apply_point(t: TransformSpec, p: Point2) -> Point2:
    """Map a single point; raises DegeneratePoint if the perspective
    denominator vanishes."""
    if isinstance(t, Identity):
        return (float(p[0]), float(p[1]))
    mat = to_homography(t)
    u, v = p
    den = mat[2, 0] * u + mat[2, 1] * v + mat[2, 2]
    if abs(den) <= _DEN_TOL:
        raise DegeneratePoint(f"denominator vanishes at {p}")
    return (
        (mat[0, 0] * u + mat[0, 1] * v + mat[0, 2]) / den,
        (mat[1, 0] * u + mat[1, 1] * v + mat[1, 2]) / den,
    )


def apply_points(t: TransformSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized point mapping.

    Returns ``(mapped (N,2), ok (N,) bool)`` where ``ok`` is False for
    points whose denominator vanishes (mapped entries are then NaN).
    """
    pts = np.asarray(pts, dtype=np.float64)
    mat = to_homography(t)
    hom = mat @ np.concatenate([pts.T, np.ones((1, len(pts)))], axis=0)
    den = hom[2]
    ok = np.abs(den) > _DEN_TOL
    safe = np.where(ok, den, 1.0)
    out = np.stack([hom[0] / safe, hom[1] / safe], axis=1)
    out[~ok] = np.nan
    return out, ok


def invert(t: TransformSpec) -> TransformSpec:
    """Inverse transform; same-kind for Identity/Rotate/Zoom, homography
    otherwise."""
    if isinstance(t, Identity):
        return Identity()
    if isinstance(t, Rotate):
        return Rotate(theta=-t.theta, center=t.center)
    if isinstance(t, Zoom):
        return Zoom(scale=1.0 / t.scale, center=t.center)
    mat = to_homography(t)
    if abs(np.linalg.det(mat)) <= _DET_TOL:
        raise NonInvertible("determinant below 1e-9")
    return from_homography(np.linalg.inv(mat))


def compose(t1: TransformSpec, t2: TransformSpec) -> TransformSpec:
    """Transform applying ``t1`` first, then ``t2``."""
    if isinstance(t1, Identity) and isinstance(t2, Identity):
        return Identity()
    return from_homography(to_homography(t2) @ to_homography(t1))


def bilinear_weights(shape: tuple[int, int], u: np.ndarray, v: np.ndarray):
    """Corner indices and weights for bilinear sampling at fractional (u, v).

    Returns ``(v0, u0, v1, u1, w00, w01, w10, w11, inb)`` where ``inb`` marks
    sample locations inside ``[0, w-1] x [0, h-1]``; out-of-bounds locations
    get clamped indices and must be masked by the caller.
    """
    hh, ww = shape
    with np.errstate(invalid="ignore"):
        inb = (u >= 0) & (u <= ww - 1) & (v >= 0) & (v <= hh - 1)
    uc = np.clip(np.nan_to_num(u, nan=0.0), 0, ww - 1)
    vc = np.clip(np.nan_to_num(v, nan=0.0), 0, hh - 1)
    u0 = np.floor(uc).astype(np.intp)
    v0 = np.floor(vc).astype(np.intp)
    fu = uc - u0
    fv = vc - v0
    u1 = np.minimum(u0 + 1, ww - 1)
    v1 = np.minimum(v0 + 1, hh - 1)
    w00 = (1 - fu) * (1 - fv)
    w01 = fu * (1 - fv)
    w10 = (1 - fu) * fv
    w11 = fu * fv
    return v0, u0, v1, u1, w00, w01, w10, w11, inb


def bilinear_sample(grid: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear samples of ``grid`` at fractional (u, v); returns
    ``(values, inb)`` with values 0 where out of bounds."""
    v0, u0, v1, u1, w00, w01, w10, w11, inb = bilinear_weights(grid.shape, u, v)
    vals = (
        w00 * grid[v0, u0]
        + w01 * grid[v0, u1]
        + w10 * grid[v1, u0]
        + w11 * grid[v1, u1]
    )
    return np.where(inb, vals, 0.0), inb


def warp_map(
    m: np.ndarray, t: TransformSpec, out_h: int, out_w: int
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a grid by ``t`` via inverse mapping and bilinear sampling.

    Output cell (u, v) holds the sample of ``m`` at ``invert(t)(u, v)``.
    Returns ``(warped, valid)``; cells whose source location falls outside
    ``m`` are 0 with valid = 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise ValidationError("warp_map requires a finite grid")
    tinv = invert(t)
    uu, vv = np.meshgrid(np.arange(out_w), np.arange(out_h))
    pts = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    src, ok = apply_points(tinv, pts)
    vals, inb = bilinear_sample(m, src[:, 0], src[:, 1])
    valid = (inb & ok).astype(np.float64)
    return (vals * valid).reshape(out_h, out_w), valid.reshape(out_h, out_w)


def gaussian_mask(
    keypoints: list[Point2], sigma_u: float, sigma_v: float, h: int, w: int
) -> np.ndarray:
    """Sum of axis-aligned Gaussian bumps centered at the keypoints,
    evaluated on the integer grid."""
    if len(keypoints) == 0:
        raise EmptyKeypoints("gaussian_mask requires at least one keypoint")
    if not (sigma_u > 0 and sigma_v > 0):
        raise ValidationError("sigmas must be positive")
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    uu = np.arange(w, dtype=np.float64)
    vv = np.arange(h, dtype=np.float64)
    du = (uu[None, :] - kps[:, 0:1]) ** 2 / (2.0 * sigma_u**2)  # (K, w)
    dv = (vv[None, :] - kps[:, 1:2]) ** 2 / (2.0 * sigma_v**2)  # (K, h)
    return np.einsum("kv,ku->vu", np.exp(-dv), np.exp(-du))


def affine_from_points(src: np.ndarray, dst: np.ndarray) -> Perspective:
    """Least-squares affine transform mapping src points onto dst points.

    Needs >= 3 non-collinear correspondences; raises
    DegenerateConfiguration on rank deficiency.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise ValidationError("affine fit needs at least 3 points")
    a = np.concatenate([src, np.ones((len(src), 1))], axis=1)
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1.0):
        raise DegenerateConfiguration("collinear points in affine fit")
    coef, _, _, _ = np.linalg.lstsq(a, dst, rcond=None)  # (3, 2)
    mat = np.array(
        [
            [coef[0, 0], coef[1, 0], coef[2, 0]],
            [coef[0, 1], coef[1, 1], coef[2, 1]],
            [0.0, 0.0, 1.0],
        ]
    )
    if abs(np.linalg.det(mat)) <= _DET_TOL:
        raise DegenerateConfiguration("affine fit is singular")
    return from_homography(mat)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> Perspective:
    """Least-squares homography (DLT with Hartley normalization) mapping
    src points onto dst points; exact for 4 points in general position."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise ValidationError("homography fit needs at least 4 points")

    def normalizer(pts):
        c = pts.mean(axis=0)
        scale = math.sqrt(2.0) / max(np.linalg.norm(pts - c, axis=1).mean(), 1e-12)
        return np.array(
            [[scale, 0, -scale * c[0]], [0, scale, -scale * c[1]], [0, 0, 1]]
        )

    ts, td = normalizer(src), normalizer(dst)
    sh = (ts @ np.concatenate([src.T, np.ones((1, n))], axis=0))[:2].T
    dh = (td @ np.concatenate([dst.T, np.ones((1, n))], axis=0))[:2].T
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = sh
    a[0::2, 2] = 1.0
    a[0::2, 6] = -dh[:, 0] * sh[:, 0]
    a[0::2, 7] = -dh[:, 0] * sh[:, 1]
    a[0::2, 8] = -dh[:, 0]
    a[1::2, 3:5] = sh
    a[1::2, 5] = 1.0
    a[1::2, 6] = -dh[:, 1] * sh[:, 0]
    a[1::2, 7] = -dh[:, 1] * sh[:, 1]
    a[1::2, 8] = -dh[:, 1]
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-2] <= 1e-10 * max(sv[0], 1.0):
        raise DegenerateConfiguration("degenerate point configuration in DLT")
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    mat = np.linalg.inv(td) @ hn @ ts
    if abs(np.linalg.det(mat)) <= _DET_TOL:
        raise DegenerateConfiguration("homography fit is singular")
    return from_homography(mat)


def rescale_transform(
    t: TransformSpec, factor: float, offset: float = 0.0
) -> TransformSpec:
    """Conjugate a transform into a coordinate frame scaled down by
    ``factor``: new coords are ``(old - offset) / factor``."""
    if isinstance(t, Identity):
        return Identity()
    s = np.array(
        [
            [1.0 / factor, 0.0, -offset / factor],
            [0.0, 1.0 / factor, -offset / factor],
            [0.0, 0.0, 1.0],
        ]
    )
    return from_homography(s @ to_homography(t) @ np.linalg.inv(s))


def attention_transform(t: TransformSpec, factor: int = 4) -> TransformSpec:
    """Express an image-space transform in attention-grid coordinates.

    Attention cell centers sit at image coordinate ``factor*a + (factor-1)/2``,
    so the conjugation uses that offset.
    """
    return rescale_transform(t, float(factor), (factor - 1) / 2.0)


@dataclass(frozen=True)
class TransformFamily:
    """Parameter ranges for random transform sampling on a ``width`` x
    ``height`` frame.  ``kinds`` lists the enabled transform kinds."""

    width: int
    height: int
    kinds: tuple[str, ...] = ("crop_resize", "rotate", "zoom", "perspective")
    crop_scale: tuple[float, float] = (0.5, 1.0)
    rotate_range: tuple[float, float] = (-math.pi / 6, math.pi / 6)
    zoom_range: tuple[float, float] = (0.8, 1.25)
    perspective_jitter: float = 0.1

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "kinds": list(self.kinds),
            "crop_scale": list(self.crop_scale),
            "rotate_range": list(self.rotate_range),
            "zoom_range": list(self.zoom_range),
            "perspective_jitter": self.perspective_jitter,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TransformFamily":
        return cls(
            width=int(obj["width"]),
            height=int(obj["height"]),
            kinds=tuple(obj.get("kinds", cls.kinds)),
            crop_scale=tuple(obj.get("crop_scale", cls.crop_scale)),
            rotate_range=tuple(obj.get("rotate_range", cls.rotate_range)),
            zoom_range=tuple(obj.get("zoom_range", cls.zoom_range)),
            perspective_jitter=float(obj.get("perspective_jitter", cls.perspective_jitter)),
        )


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_transform(family: TransformFamily, seed_or_rng) -> TransformSpec:
    """Draw one transform from the family; deterministic for a fixed seed."""
    if len(family.kinds) == 0:
        raise EmptyFamily("no transform kinds enabled")
    rng = _as_rng(seed_or_rng)
    kind = family.kinds[int(rng.integers(len(family.kinds)))]
    wmax, hmax = family.width - 1.0, family.height - 1.0
    center = (wmax / 2.0, hmax / 2.0)
    if kind == "identity":
        return Identity()
    if kind == "crop_resize":
        s = rng.uniform(*family.crop_scale)
        cw, ch = s * wmax, s * hmax
        x0 = rng.uniform(0.0, wmax - cw)
        y0 = rng.uniform(0.0, hmax - ch)
        return CropResize(x0=x0, y0=y0, w=cw, h=ch, out_w=wmax, out_h=hmax)
    if kind == "rotate":
        return Rotate(theta=rng.uniform(*family.rotate_range), center=center)
    if kind == "zoom":
        return Zoom(scale=rng.uniform(*family.zoom_range), center=center)
    if kind == "perspective":
        corners = np.array(
            [[0.0, 0.0], [wmax, 0.0], [wmax, hmax], [0.0, hmax]]
        )
        j = family.perspective_jitter
        while True:
            jit = corners + rng.uniform(
                [-j * wmax, -j * hmax], [j * wmax, j * hmax], size=(4, 2)
            )
            try:
                return homography_from_points(corners, jit)
            except (DegenerateConfiguration, NonInvertible):
                continue
    raise EmptyFamily(f"unknown transform kind: {kind}")


def transform_to_json(t: TransformSpec) -> dict:
    """Serialize as ``{"kind": ..., "params": {...}}``."""
    if isinstance(t, Identity):
        return {"kind": "identity", "params": {}}
    if isinstance(t, CropResize):
        return {
            "kind": "crop_resize",
            "params": {
                "x0": t.x0,
                "y0": t.y0,
                "w": t.w,
                "h": t.h,
                "out_w": t.out_w,
                "out_h": t.out_h,
            },
        }
    if isinstance(t, Rotate):
        return {"kind": "rotate", "params": {"theta": t.theta, "center": list(t.center)}}
    if isinstance(t, Zoom):
        return {"kind": "zoom", "params": {"scale": t.scale, "center": list(t.center)}}
    if isinstance(t, Perspective):
        return {"kind": "perspective", "params": {"h": list(t.h)}}
    raise TypeError(f"not a TransformSpec: {t!r}")


def transform_from_json(obj: dict) -> TransformSpec:
    kind = obj["kind"]
    p = obj.get("params", {})
    if kind == "identity":
        return Identity()
    if kind == "crop_resize":
        return CropResize(
            x0=p["x0"], y0=p["y0"], w=p["w"], h=p["h"], out_w=p["out_w"], out_h=p["out_h"]
        )
    if kind == "rotate":
        return Rotate(theta=p["theta"], center=tuple(p["center"]))
    if kind == "zoom":
        return Zoom(scale=p["scale"], center=tuple(p["center"]))
    if kind == "perspective":
        return Perspective(h=tuple(p["h"]))
    raise ValidationError(f"unknown transform kind: {kind}")


def transform_dumps(t: TransformSpec) -> str:
    return json.dumps(transform_to_json(t))


def transform_loads(s: str) -> TransformSpec:
    return transform_from_json(json.loads(s))
