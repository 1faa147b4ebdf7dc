"""A small convolutional encoder with hand-written backprop, Adam, and the two
training loops (contrastive pre-training, AP fine-tuning).

Architecture, for 3x32x32 inputs::

    conv1 3->16 (3x3, stride 2, pad 1) -> ReLU -> conv2 16->32 (stride 2, pad 1)
    -> ReLU -> 32x8x8 feature map -> pooling -> fc 32->16 -> L2      (encode)
                                               fc output -> head 16->16 -> ReLU
                                               -> 16->8 -> L2     (encode_project)

Parameters live in plain dicts of float64 arrays; :data:`ENCODER_SHAPES` and
:data:`HEAD_SHAPES` fix the declaration order used by checkpoints.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .aggregate import AggregatorConfig, aggregate, gem, mac, spoc
from .binio import expect_eof, expect_magic, read_f32, read_u32, write_f32, write_u32
from .data import AugmentConfig, augment
from .errors import DataError, DegenerateVectorError, FormatError, ShapeError
from .losses import ntxent, quantized_ap_loss
from .seeding import generator

log = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
CHECKPOINT_MAGIC = b"IRENCV01"

ENCODER_SHAPES = {
    "conv1_w": (16, 3, 3, 3),
    "conv1_b": (16,),
    "conv2_w": (32, 16, 3, 3),
    "conv2_b": (32,),
    "fc_w": (16, 32),
    "fc_b": (16,),
}
HEAD_SHAPES = {
    "head_w1": (16, 16),
    "head_b1": (16,),
    "head_w2": (8, 16),
    "head_b2": (8,),
}
TRAINABLE_POOLING = ("MAC", "SPoC", "GeM")


def init_params(rng, head=True):
    """He-normal weights, zero biases."""
    shapes = dict(ENCODER_SHAPES, **(HEAD_SHAPES if head else {}))
    params = {}
    for name, shape in shapes.items():
        if name.endswith(("_b", "_b1", "_b2")):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


# -- layers ---------------------------------------------------------------


def conv2d_forward(x, w, b, stride=2, pad=1):
    """``x``: (B, Cin, H, W); ``w``: (Cout, Cin, k, k). Returns output and cache."""
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, Cin * k * k)
    out = cols @ w.reshape(Cout, -1).T + b
    out = out.transpose(0, 2, 1).reshape(B, Cout, Ho, Wo)
    return out, (cols, x.shape, stride, pad)


def conv2d_backward(dout, cache, w):
    cols, x_shape, stride, pad = cache
    B, Cin, H, W = x_shape
    Cout, _, k, _ = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dflat = dout.reshape(B, Cout, Ho * Wo)
    dw = np.einsum("bop,bpi->oi", dflat, cols).reshape(w.shape)
    db = dflat.sum(axis=(0, 2))
    dcols = (dflat.transpose(0, 2, 1) @ w.reshape(Cout, -1)).reshape(B, Ho, Wo, Cin, k, k)
    dxp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, pad : pad + H, pad : pad + W], dw, db


def pool_forward(fm, cfg):
    if cfg.kind == "MAC":
        return mac(fm)
    if cfg.kind == "SPoC":
        return spoc(fm)
    if cfg.kind == "GeM":
        return gem(fm, cfg.gem_p)
    return np.stack([aggregate(f, cfg) for f in fm])


def pool_backward(dg, fm, g, cfg):
    B, C, H, W = fm.shape
    if cfg.kind == "SPoC":
        return np.broadcast_to(dg[:, :, None, None] / (H * W), fm.shape).copy()
    if cfg.kind == "MAC":
        flat = fm.reshape(B, C, -1)
        idx = flat.argmax(axis=2)
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[:, :, None], dg[:, :, None], axis=2)
        return dflat.reshape(fm.shape)
    if cfg.kind == "GeM":
        p = cfg.gem_p
        x = np.maximum(fm, 0.0)
        safe_g = np.where(g > 0, g, 1.0)
        coef = np.where(g > 0, dg * safe_g ** (1.0 - p), 0.0) / (H * W)
        xpow = np.where(x > 0, x ** (p - 1.0), 0.0)
        return coef[:, :, None, None] * xpow
    raise ValueError("pooling %r is not differentiable here (use one of %s)" % (cfg.kind, TRAINABLE_POOLING))


def l2_backward(dy, y, norm):
    """Backprop through ``y = u / |u|`` given ``y`` and ``|u|`` (row-wise)."""
    return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / norm


def _normalize_rows(u):
    norm = np.sqrt((u * u).sum(axis=1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateVectorError("encoder produced a zero descriptor")
    return u / norm, norm


# -- forward / backward -----------------------------------------------------


def _as_images(img):
    x = np.asarray(img, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
        raise ShapeError("encoder expects 3x32x32 images, got %s" % (np.shape(img),))
    return x, single


def feature_maps(params, img):
    """Last conv-layer activations, (B, 32, 8, 8)."""
    x, single = _as_images(img)
    a1 = np.maximum(conv2d_forward(x, params["conv1_w"], params["conv1_b"])[0], 0.0)
    a2 = np.maximum(conv2d_forward(a1, params["conv2_w"], params["conv2_b"])[0], 0.0)
    return a2[0] if single else a2


def forward(params, x, pooling, head=False):
    """Batched forward pass; returns ``(output, cache)``.

    Output is the unit descriptor (``head=False``) or the unit projection.
    """
    c1, k1 = conv2d_forward(x, params["conv1_w"], params["conv1_b"])
    a1 = np.maximum(c1, 0.0)
    c2, k2 = conv2d_forward(a1, params["conv2_w"], params["conv2_b"])
    a2 = np.maximum(c2, 0.0)
    g = pool_forward(a2, pooling)
    u = g @ params["fc_w"].T + params["fc_b"]
    cache = {"k1": k1, "c1": c1, "k2": k2, "c2": c2, "a2": a2, "g": g, "u": u}
    if not head:
        out, norm = _normalize_rows(u)
    else:
        hp = u @ params["head_w1"].T + params["head_b1"]
        hr = np.maximum(hp, 0.0)
        zr = hr @ params["head_w2"].T + params["head_b2"]
        out, norm = _normalize_rows(zr)
        cache.update(hp=hp, hr=hr)
    cache.update(out=out, norm=norm, head=head)
    return out, cache


def backward(params, dout, cache, pooling):
    """Gradients of a scalar loss w.r.t. every parameter used in ``forward``."""
    grads = {}
    dpre = l2_backward(dout, cache["out"], cache["norm"])
    u = cache["u"]
    if cache["head"]:
        grads["head_w2"] = dpre.T @ cache["hr"]
        grads["head_b2"] = dpre.sum(axis=0)
        dh = (dpre @ params["head_w2"]) * (cache["hp"] > 0)
        grads["head_w1"] = dh.T @ u
        grads["head_b1"] = dh.sum(axis=0)
        du = dh @ params["head_w1"]
    else:
        du = dpre
    grads["fc_w"] = du.T @ cache["g"]
    grads["fc_b"] = du.sum(axis=0)
    dg = du @ params["fc_w"]
    da2 = pool_backward(dg, cache["a2"], cache["g"], pooling)
    dc2 = da2 * (cache["c2"] > 0)
    da1, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(dc2, cache["k2"], params["conv2_w"])
    dc1 = da1 * (cache["c1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(dc1, cache["k1"], params["conv1_w"])
    return grads


def encode(params, img, pooling=None):
    """Unit-norm 16-d descriptor(s) for one image or a batch."""
    pooling = pooling or AggregatorConfig()
    x, single = _as_images(img)
    out, _ = forward(params, x, pooling)
    return out[0] if single else out


def encode_project(params, img, pooling=None):
    """Unit-norm 8-d projection-head embedding(s)."""
    pooling = pooling or AggregatorConfig()
    x, single = _as_images(img)
    out, _ = forward(params, x, pooling, head=True)
    return out[0] if single else out


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("gradient for %s has shape %s, parameter %s" % (name, g.shape, p.shape))
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 500
    seed: int = 0
    temperature: float = 0.5
    ap_bins: int = 20
    lr: float = 1e-3
    views_per_label: int = 4
    pooling: AggregatorConfig = AggregatorConfig()
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.pooling.kind not in TRAINABLE_POOLING:
            raise ValueError("training needs differentiable pooling: one of %s" % (TRAINABLE_POOLING,))


def train_contrastive(cfg, images, params=None):
    """Instance-discrimination pre-training with NT-Xent.

    Each step draws ``batch_size // 2`` images, augments each twice and puts
    the two views in adjacent rows. Returns ``(params, loss_trace)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise DataError("empty training set")
    if params is None:
        params = init_params(generator(cfg.seed, "encoder", "init"))
    params = {k: v.copy() for k, v in params.items()}
    rng = generator(cfg.seed, "encoder", "contrastive")
    state = AdamState(lr=cfg.lr)
    n = cfg.batch_size // 2
    trace = []
    for step in range(cfg.steps):
        idx = rng.choice(len(images), size=n, replace=len(images) < n)
        views = np.stack([augment(images[i], cfg.augment, rng) for i in idx for _ in range(2)])
        z, cache = forward(params, views, cfg.pooling, head=True)
        res = ntxent(z, cfg.temperature)
        adam_step(state, params, backward(params, res.grad, cache, cfg.pooling))
        trace.append(res.value)
        if step % 50 == 0:
            log.debug("contrastive step %d loss %.4f", step, res.value)
    return params, trace


def sample_label_batch(rng, labels, n_labels, per_label):
    """Indices for ``n_labels`` distinct labels with ``per_label`` rows each."""
    labels = np.asarray(labels)
    groups = {lab: np.flatnonzero(labels == lab) for lab in np.unique(labels)}
    eligible = sorted(lab for lab, rows in groups.items() if len(rows) >= 2)
    if len(eligible) < 2:
        raise DataError("AP fine-tuning needs at least two labels with two images each")
    chosen = rng.choice(eligible, size=min(n_labels, len(eligible)), replace=False)
    idx = []
    for lab in chosen:
        rows = groups[lab]
        idx.extend(rng.choice(rows, size=per_label, replace=len(rows) < per_label))
    return np.asarray(idx)


def finetune_ap(cfg, images, labels, params):
    """Fine-tune the encoder (head untouched) with the quantized AP loss.

    Returns ``(params, loss_trace)``.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    params = {k: v.copy() for k, v in params.items()}
    rng = generator(cfg.seed, "encoder", "finetune")
    state = AdamState(lr=cfg.lr)
    n_labels = max(2, cfg.batch_size // cfg.views_per_label)
    trace = []
    for step in range(cfg.steps):
        idx = sample_label_batch(rng, labels, n_labels, cfg.views_per_label)
        f, cache = forward(params, images[idx], cfg.pooling)
        res = quantized_ap_loss(f, labels[idx], cfg.ap_bins)
        grads = backward(params, res.grad, cache, cfg.pooling)
        adam_step(state, params, grads)
        trace.append(res.value)
        if step % 50 == 0:
            log.debug("finetune step %d loss %.4f", step, res.value)
    return params, trace


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(params, path):
    names = list(ENCODER_SHAPES) + [k for k in HEAD_SHAPES if k in params]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in names:
            arr = params[name]
            write_u32(fh, arr.size)
            write_f32(fh, arr)


def load_checkpoint(path):
    params = {}
    with open(path, "rb") as fh:
        expect_magic(fh, CHECKPOINT_MAGIC)
        for name, shape in ENCODER_SHAPES.items():
            params[name] = _read_tensor(fh, name, shape)
        pos = fh.tell()
        has_head = bool(fh.read(1))
        fh.seek(pos)
        if has_head:
            for name, shape in HEAD_SHAPES.items():
                params[name] = _read_tensor(fh, name, shape)
        expect_eof(fh)
    return params


def _read_tensor(fh, name, shape):
    (n,) = read_u32(fh)
    if n != int(np.prod(shape)):
        raise FormatError("tensor %s has %d values, expected %d" % (name, n, int(np.prod(shape))))
    return read_f32(fh, n).reshape(shape)
