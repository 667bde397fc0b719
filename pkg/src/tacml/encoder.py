"""Tiny convolutional embedding network with a spatial-attention head.

Fixed architecture (float64 throughout):

* conv 3->8, 3x3, stride 2, pad 1, ReLU
* conv 8->16, 3x3, stride 2, pad 1, ReLU
* channel attention: shared MLP 16->4->16 on spatial avg- and max-pooled
  descriptors, summed, sigmoid, modulating the feature map
* spatial attention: 7x7 conv (pad 3) over the [channel-avg; channel-max]
  maps, sigmoid -- this (H/4)x(W/4) map is the published attention map and
  also modulates the features
* global average pool, dense 16->d projection, L2 normalization

Embeddings with norm below 1e-12 return the all-zero sentinel.  Backward
passes are hand-derived and validated against central finite differences.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import load_tensor, save_tensor
from .errors import IncompatibleCheckpoint, ShapeMismatch, StaleCache

ARCH_VERSION = 1
DOWNSAMPLE_FACTOR = 4
FEATURE_CHANNELS = 16
SENTINEL_NORM = 1e-12

_TENSOR_FIELDS = (
    "conv1_w",
    "conv1_b",
    "conv2_w",
    "conv2_b",
    "ca_w1",
    "ca_b1",
    "ca_w2",
    "ca_b2",
    "sa_w",
    "sa_b",
    "proj_w",
    "proj_b",
)


@dataclass(frozen=True)
class ModelParams:
    conv1_w: np.ndarray  # (8, 3, 3, 3)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (16, 8, 3, 3)
    conv2_b: np.ndarray  # (16,)
    ca_w1: np.ndarray  # (4, 16)
    ca_b1: np.ndarray  # (4,)
    ca_w2: np.ndarray  # (16, 4)
    ca_b2: np.ndarray  # (16,)
    sa_w: np.ndarray  # (1, 2, 7, 7)
    sa_b: np.ndarray  # (1,)
    proj_w: np.ndarray  # (d, 16)
    proj_b: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.proj_w.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}

    @classmethod
    def from_dict(cls, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return cls(**{name: np.asarray(tensors[name], dtype=np.float64) for name in _TENSOR_FIELDS})


# ParamGrads mirrors ModelParams field-for-field.
ParamGrads = ModelParams


def init_params(d: int, seed) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    if d < 1:
        raise ShapeMismatch("embedding dimension must be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)

    return ModelParams(
        conv1_w=glorot((8, 3, 3, 3), 3 * 9, 8 * 9),
        conv1_b=np.zeros(8),
        conv2_w=glorot((16, 8, 3, 3), 8 * 9, 16 * 9),
        conv2_b=np.zeros(16),
        ca_w1=glorot((4, 16), 16, 4),
        ca_b1=np.zeros(4),
        ca_w2=glorot((16, 4), 4, 16),
        ca_b2=np.zeros(16),
        sa_w=glorot((1, 2, 7, 7), 2 * 49, 1 * 49),
        sa_b=np.zeros(1),
        proj_w=glorot((d, 16), 16, d),
        proj_b=np.zeros(d),
    )


def zero_grads(d: int) -> ParamGrads:
    zeros = init_params(d, 0).as_dict()
    return ParamGrads.from_dict({k: np.zeros_like(v) for k, v in zeros.items()})


def _conv_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    out = np.matmul(w.reshape(o, -1), cols2) + b[:, None]
    cache = (cols2, x.shape, w.shape, stride, pad, oh, ow)
    return out.reshape(n, o, oh, ow), cache


def _conv_input_grad(g2, w, cache):
    cols2, x_shape, w_shape, stride, pad, oh, ow = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w_shape
    gcols = np.matmul(w.reshape(o, -1).T, g2)  # (n, c*kh*kw, oh*ow)
    gcols = gcols.reshape(n, c, kh, kw, oh, ow)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Cache:
    """Intermediates retained by forward for the matching backward call."""

    params: ModelParams
    x: np.ndarray
    c1: tuple
    h1: np.ndarray
    c2: tuple
    h2: np.ndarray
    a2: np.ndarray
    avg: np.ndarray
    mx_flat_idx: np.ndarray
    z1_avg: np.ndarray
    z1_mx: np.ndarray
    r_avg: np.ndarray
    r_mx: np.ndarray
    ca: np.ndarray
    f_c: np.ndarray
    smax_idx: np.ndarray
    c3: tuple
    attn: np.ndarray
    f_m: np.ndarray
    g: np.ndarray
    emb_raw: np.ndarray
    norm: np.ndarray
    emb: np.ndarray


def forward_batch(params: ModelParams, xs: np.ndarray):
    """Batched forward pass.

    Returns ``(embeddings (N, d), attention (N, H/4, W/4), cache)``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 4:
        raise ShapeMismatch("expected (N, C, H, W) input")
    n, c, h, w = xs.shape
    if c != params.conv1_w.shape[1]:
        raise ShapeMismatch(f"expected {params.conv1_w.shape[1]} channels, got {c}")
    if h < 8 or w < 8 or h % 4 or w % 4:
        raise ShapeMismatch("H and W must be >= 8 and divisible by 4")

    h1, c1 = _conv_forward(xs, params.conv1_w, params.conv1_b, stride=2, pad=1)
    a1 = np.maximum(h1, 0.0)
    h2, c2 = _conv_forward(a1, params.conv2_w, params.conv2_b, stride=2, pad=1)
    a2 = np.maximum(h2, 0.0)  # (n, 16, h/4, w/4)
    nc = a2.shape[1]
    hh, ww = a2.shape[2], a2.shape[3]

    # channel attention: shared MLP on avg- and max-pooled descriptors
    avg = a2.mean(axis=(2, 3))
    flat = a2.reshape(n, nc, hh * ww)
    mx_flat_idx = flat.argmax(axis=2)
    mx = np.take_along_axis(flat, mx_flat_idx[:, :, None], axis=2)[:, :, 0]

    z1_avg = avg @ params.ca_w1.T + params.ca_b1
    r_avg = np.maximum(z1_avg, 0.0)
    z1_mx = mx @ params.ca_w1.T + params.ca_b1
    r_mx = np.maximum(z1_mx, 0.0)
    ca_logit = (r_avg + r_mx) @ params.ca_w2.T + 2.0 * params.ca_b2
    # bias enters once per MLP application; two applications are summed
    ca = _sigmoid(ca_logit)
    f_c = a2 * ca[:, :, None, None]

    # spatial attention over [channel-avg; channel-max] maps
    savg = f_c.mean(axis=1, keepdims=True)
    smax_idx = f_c.argmax(axis=1)
    smax = np.take_along_axis(f_c, smax_idx[:, None, :, :], axis=1)
    scat = np.concatenate([savg, smax], axis=1)
    slogit, c3 = _conv_forward(scat, params.sa_w, params.sa_b, stride=1, pad=3)
    attn = _sigmoid(slogit[:, 0])  # (n, h/4, w/4)
    f_m = f_c * attn[:, None, :, :]

    g = f_m.mean(axis=(2, 3))
    emb_raw = g @ params.proj_w.T + params.proj_b
    norm = np.linalg.norm(emb_raw, axis=1)
    emb = np.where(
        (norm >= SENTINEL_NORM)[:, None],
        emb_raw / np.maximum(norm, SENTINEL_NORM)[:, None],
        0.0,
    )

    cache = Cache(
        params=params, x=xs, c1=c1, h1=h1, c2=c2, h2=h2, a2=a2, avg=avg,
        mx_flat_idx=mx_flat_idx, z1_avg=z1_avg, z1_mx=z1_mx, r_avg=r_avg,
        r_mx=r_mx, ca=ca, f_c=f_c, smax_idx=smax_idx, c3=c3, attn=attn,
        f_m=f_m, g=g, emb_raw=emb_raw, norm=norm, emb=emb,
    )
    return emb, attn, cache


def forward(params: ModelParams, x: np.ndarray):
    """Single-image forward; see forward_batch."""
    emb, attn, cache = forward_batch(params, np.asarray(x)[None])
    return emb[0], attn[0], cache


def backward_batch(
    cache: Cache,
    grad_emb: np.ndarray,
    grad_attn: np.ndarray,
    grad_emb_raw: np.ndarray | None = None,
) -> ParamGrads:
    """Parameter gradients for a loss with the given output partials.

    ``grad_emb`` is w.r.t. the normalized embedding, ``grad_attn`` w.r.t. the
    attention map; ``grad_emb_raw`` optionally adds a partial w.r.t. the
    pre-normalization embedding.  Linear in all supplied gradients.
    """
    p = cache.params
    n, nc, hh, ww = cache.a2.shape
    grad_emb = np.asarray(grad_emb, dtype=np.float64)
    grad_attn = np.asarray(grad_attn, dtype=np.float64)
    if grad_emb.shape != cache.emb.shape or grad_attn.shape != cache.attn.shape:
        raise StaleCache(
            f"gradient shapes {grad_emb.shape}/{grad_attn.shape} do not match "
            f"cache {cache.emb.shape}/{cache.attn.shape}"
        )

    # normalization backward (sentinel rows get zero gradient)
    live = cache.norm >= SENTINEL_NORM
    safe = np.maximum(cache.norm, SENTINEL_NORM)[:, None]
    inner = (grad_emb * cache.emb).sum(axis=1, keepdims=True)
    ge = np.where(live[:, None], (grad_emb - cache.emb * inner) / safe, 0.0)
    if grad_emb_raw is not None:
        ge = ge + np.asarray(grad_emb_raw, dtype=np.float64)

    g_proj_w = ge.T @ cache.g
    g_proj_b = ge.sum(axis=0)
    gg = ge @ p.proj_w  # (n, 16)

    gf_m = np.broadcast_to(gg[:, :, None, None] / (hh * ww), cache.f_m.shape)
    gf_c = gf_m * cache.attn[:, None, :, :]
    g_attn_total = grad_attn + (gf_m * cache.f_c).sum(axis=1)

    # spatial attention conv backward
    gslogit = (g_attn_total * cache.attn * (1.0 - cache.attn))[:, None]
    g2 = gslogit.reshape(n, 1, hh * ww)
    g_sa_b = g2.sum(axis=(0, 2))
    g_sa_w = np.einsum("nop,nkp->ok", g2, cache.c3[0]).reshape(p.sa_w.shape)
    gscat = _conv_input_grad(g2, p.sa_w, cache.c3)
    gsavg, gsmax = gscat[:, 0], gscat[:, 1]
    gf_c = gf_c + gsavg[:, None, :, :] / nc
    scatter = np.zeros_like(gf_c)
    np.put_along_axis(scatter, cache.smax_idx[:, None, :, :], gsmax[:, None, :, :], axis=1)
    gf_c = gf_c + scatter

    # channel attention backward
    g_a2 = gf_c * cache.ca[:, :, None, None]
    g_ca = (gf_c * cache.a2).sum(axis=(2, 3))
    g_ca_logit = g_ca * cache.ca * (1.0 - cache.ca)

    g_ca_w2 = g_ca_logit.T @ (cache.r_avg + cache.r_mx)
    g_ca_b2 = 2.0 * g_ca_logit.sum(axis=0)
    gr = g_ca_logit @ p.ca_w2
    gz1_avg = gr * (cache.z1_avg > 0)
    gz1_mx = gr * (cache.z1_mx > 0)
    g_ca_w1 = gz1_avg.T @ cache.avg + gz1_mx.T @ _gather_mx(cache)
    g_ca_b1 = (gz1_avg + gz1_mx).sum(axis=0)
    g_avg = gz1_avg @ p.ca_w1
    g_mx = gz1_mx @ p.ca_w1

    g_a2 = g_a2 + g_avg[:, :, None, None] / (hh * ww)
    flat = np.zeros((n, nc, hh * ww))
    np.put_along_axis(flat, cache.mx_flat_idx[:, :, None], g_mx[:, :, None], axis=2)
    g_a2 = g_a2 + flat.reshape(n, nc, hh, ww)

    # conv backward chain
    gh2 = g_a2 * (cache.h2 > 0)
    g2c = gh2.reshape(n, nc, hh * ww)
    g_conv2_b = g2c.sum(axis=(0, 2))
    g_conv2_w = np.einsum("nop,nkp->ok", g2c, cache.c2[0]).reshape(p.conv2_w.shape)
    ga1 = _conv_input_grad(g2c, p.conv2_w, cache.c2)

    gh1 = ga1 * (cache.h1 > 0)
    oh1, ow1 = cache.h1.shape[2], cache.h1.shape[3]
    g1c = gh1.reshape(n, cache.h1.shape[1], oh1 * ow1)
    g_conv1_b = g1c.sum(axis=(0, 2))
    g_conv1_w = np.einsum("nop,nkp->ok", g1c, cache.c1[0]).reshape(p.conv1_w.shape)

    return ParamGrads(
        conv1_w=g_conv1_w, conv1_b=g_conv1_b, conv2_w=g_conv2_w, conv2_b=g_conv2_b,
        ca_w1=g_ca_w1, ca_b1=g_ca_b1, ca_w2=g_ca_w2, ca_b2=g_ca_b2,
        sa_w=g_sa_w, sa_b=g_sa_b, proj_w=g_proj_w, proj_b=g_proj_b,
    )


def _gather_mx(cache: Cache) -> np.ndarray:
    n, nc = cache.avg.shape
    flat = cache.a2.reshape(n, nc, -1)
    return np.take_along_axis(flat, cache.mx_flat_idx[:, :, None], axis=2)[:, :, 0]


def backward(cache: Cache, grad_emb, grad_attn, grad_emb_raw=None) -> ParamGrads:
    """Single-image backward; gradients may be 1-D/2-D as from forward()."""
    ge = np.asarray(grad_emb, dtype=np.float64)
    ga = np.asarray(grad_attn, dtype=np.float64)
    if ge.ndim == 1:
        ge = ge[None]
    if ga.ndim == 2:
        ga = ga[None]
    gr = None
    if grad_emb_raw is not None:
        gr = np.asarray(grad_emb_raw, dtype=np.float64)
        if gr.ndim == 1:
            gr = gr[None]
    return backward_batch(cache, ge, ga, gr)


def add_grads(a: ParamGrads, b: ParamGrads) -> ParamGrads:
    return ParamGrads.from_dict(
        {k: av + bv for (k, av), bv in zip(a.as_dict().items(), b.as_dict().values())}
    )


def save_checkpoint(out_dir, params: ModelParams, seed: int) -> None:
    """Checkpoint = one tensor file per parameter plus model.json metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in params.as_dict().items():
        save_tensor(out / f"{name}.tact", arr)
    (out / "model.json").write_text(
        json.dumps(
            {
                "d": params.d,
                "seed": seed,
                "downsample_factor": DOWNSAMPLE_FACTOR,
                "arch_version": ARCH_VERSION,
            },
            sort_keys=True,
        )
    )


def load_checkpoint(ckpt_dir) -> tuple[ModelParams, dict]:
    ckpt = Path(ckpt_dir)
    meta = json.loads((ckpt / "model.json").read_text())
    if meta.get("arch_version") != ARCH_VERSION:
        raise IncompatibleCheckpoint(
            f"arch_version {meta.get('arch_version')} != {ARCH_VERSION}"
        )
    params = ModelParams.from_dict(
        {name: load_tensor(ckpt / f"{name}.tact") for name in _TENSOR_FIELDS}
    )
    if params.d != meta.get("d"):
        raise IncompatibleCheckpoint(
            f"projection rows {params.d} disagree with metadata d={meta.get('d')}"
        )
    return params, meta
