"""From-scratch dense CNN kernels and a configurable-depth U-Net.

All kernels operate on plain numpy arrays in (n, c, h, w) layout and come in
forward/backward pairs whose gradients are exact (validated against central
finite differences in float64). Conventions:

  * convolutions are cross-correlations with zero same-padding, stride 1,
    odd kernel sizes; accumulation order over kernel taps is fixed (row-major
    over (dy, dx)) so results are bit-reproducible for a fixed thread count
  * max-pooling is 2x2 stride 2; ties go to the first window element in
    row-major order, and the gradient is routed there
  * up-convolutions are 2x2 stride-2 transposed convolutions (each output
    pixel receives exactly one kernel tap)
  * arrays keep their dtype end to end: float32 for training, float64 for
    gradient checking

The U-Net is the classic encoder/decoder: ``depth`` resolution levels, a
double-convolution (two 3x3 conv + ReLU) per level, max-pool between encoder
levels, and up-conv + skip concatenation + double-convolution on the way up,
finished by a 1x1 convolution with no output activation. Encoder level ``i``
carries ``base_channels * 2**i`` features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"UNP1"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# kernels

def conv2d_forward(x: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 cross-correlation: (n,ci,h,w) * (co,ci,kh,kw) -> (n,co,h,w)."""
    n, ci, h, w = x.shape
    co, ci_k, kh, kw = k.shape
    if ci != ci_k:
        raise ValueError(f"input has {ci} channels, kernel expects {ci_k}")
    if bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} != ({co},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same padding requires odd kernel dims")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, co, h, w), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + h, dx : dx + w]
            out += np.einsum("oi,nihw->nohw", k[:, :, dy, dx], patch, optimize=True)
    out += bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, k: np.ndarray, grad_out: np.ndarray):
    """Gradients of sum(grad_out * conv2d_forward(x, k, b)) w.r.t. x, k, b."""
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    if grad_out.shape != (n, co, h, w):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, co, h, w)}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    grad_xp = np.zeros_like(xp)
    grad_k = np.empty_like(k)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + h, dx : dx + w]
            grad_k[:, :, dy, dx] = np.einsum(
                "nohw,nihw->oi", grad_out, patch, optimize=True
            )
            grad_xp[:, :, dy : dy + h, dx : dx + w] += np.einsum(
                "oi,nohw->nihw", k[:, :, dy, dx], grad_out, optimize=True
            )
    grad_x = grad_xp[:, :, ph : ph + h, pw : pw + w]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_k, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient passes where x > 0; the subgradient at exactly 0 is 0."""
    return grad_out * (x > 0)


def maxpool2d_forward(x: np.ndarray):
    """2x2 stride-2 max-pool; returns (pooled, argmax) with argmax recording the
    winning in-window index (row-major, first maximum wins)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    argmax = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool2d_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Scatter grad_out back to the recorded argmax positions."""
    n, c, oh, ow = grad_out.shape
    flat = np.zeros((n, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(flat, argmax[..., None], grad_out[..., None], axis=-1)
    return (
        flat.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * oh, 2 * ow)
    )


def upconv2d_forward(x: np.ndarray, k: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """2x2 stride-2 transposed convolution: (n,ci,h,w) * (ci,co,2,2) -> (n,co,2h,2w)."""
    n, ci, h, w = x.shape
    ci_k, co, kh, kw = k.shape
    if ci != ci_k or (kh, kw) != (2, 2):
        raise ValueError(f"kernel shape {k.shape} incompatible with input {x.shape}")
    if bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} != ({co},)")
    out = np.empty((n, co, 2 * h, 2 * w), dtype=x.dtype)
    for dy in range(2):
        for dx in range(2):
            out[:, :, dy::2, dx::2] = np.einsum(
                "io,nihw->nohw", k[:, :, dy, dx], x, optimize=True
            )
    out += bias[None, :, None, None]
    return out


def upconv2d_backward(x: np.ndarray, k: np.ndarray, grad_out: np.ndarray):
    n, ci, h, w = x.shape
    _, co, _, _ = k.shape
    if grad_out.shape != (n, co, 2 * h, 2 * w):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, co, 2 * h, 2 * w)}")
    grad_x = np.zeros_like(x)
    grad_k = np.empty_like(k)
    for dy in range(2):
        for dx in range(2):
            g = grad_out[:, :, dy::2, dx::2]
            grad_k[:, :, dy, dx] = np.einsum("nihw,nohw->io", x, g, optimize=True)
            grad_x += np.einsum("io,nohw->nihw", k[:, :, dy, dx], g, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_k, grad_bias


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two (n,*,h,w) tensors along the channel axis."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, first_channels: int):
    """Backward of concat_channels: split the gradient at the seam."""
    return grad[:, :first_channels], grad[:, first_channels:]


def pad_spatial(x: np.ndarray, multiple: int):
    """Zero-pad bottom/right so h and w become multiples of ``multiple``.

    Returns (padded, (h, w)) where (h, w) is the crop record.
    """
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad), (h, w)


def crop_spatial(x: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    return x[..., :h, :w]


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements; returns (loss, dloss/dpred)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def clamp_255(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 255)


def round_half_up_uint8(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half-up to uint8 (19.5 -> 20)."""
    return np.floor(clamp_255(x) + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# U-Net

@dataclass(frozen=True)
class UNetConfig:
    depth: int = 5
    in_channels: int = 36
    out_channels: int = 9
    base_channels: int = 64
    normalize: bool = False  # feed inputs/targets as value/255 instead of raw 0-255

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        for name in ("in_channels", "out_channels", "base_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def level_channels(self, i: int) -> int:
        return self.base_channels * 2**i

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass
class UNetParams:
    """All weights of a U-Net, keyed by a stable name scheme.

    enc{i}.conv{1,2}.{w,b} for i in 0..depth-1, up{i}.{w,b} and
    dec{i}.conv{1,2}.{w,b} for i in depth-2..0, head.{w,b}. Dict insertion
    order is the canonical serialization order.
    """

    config: UNetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "UNetParams":
        return UNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "UNetParams":
        return UNetParams(
            self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()}
        )


def _param_shapes(cfg: UNetConfig):
    shapes = {}
    prev = cfg.in_channels
    for i in range(cfg.depth):
        f = cfg.level_channels(i)
        assert f == cfg.base_channels * 2**i
        shapes[f"enc{i}.conv1.w"] = (f, prev, 3, 3)
        shapes[f"enc{i}.conv1.b"] = (f,)
        shapes[f"enc{i}.conv2.w"] = (f, f, 3, 3)
        shapes[f"enc{i}.conv2.b"] = (f,)
        prev = f
    for i in reversed(range(cfg.depth - 1)):
        f = cfg.level_channels(i)
        shapes[f"up{i}.w"] = (cfg.level_channels(i + 1), f, 2, 2)
        shapes[f"up{i}.b"] = (f,)
        shapes[f"dec{i}.conv1.w"] = (f, 2 * f, 3, 3)
        shapes[f"dec{i}.conv1.b"] = (f,)
        shapes[f"dec{i}.conv2.w"] = (f, f, 3, 3)
        shapes[f"dec{i}.conv2.b"] = (f,)
    shapes["head.w"] = (cfg.out_channels, cfg.level_channels(0), 1, 1)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def init_params(cfg: UNetConfig, seed: int, dtype=np.float32) -> UNetParams:
    """He-style fan-in init for weights, zeros for biases, seeded and deterministic."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            if name.startswith("up"):
                fan_in = shape[0] * shape[2] * shape[3]
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return UNetParams(cfg, tensors)


def _double_conv(tensors, prefix, x):
    z1 = conv2d_forward(x, tensors[f"{prefix}.conv1.w"], tensors[f"{prefix}.conv1.b"])
    a1 = relu_forward(z1)
    z2 = conv2d_forward(a1, tensors[f"{prefix}.conv2.w"], tensors[f"{prefix}.conv2.b"])
    a2 = relu_forward(z2)
    return a2, (x, z1, a1, z2)


def _double_conv_backward(tensors, prefix, cache, grad_out, grads):
    x, z1, a1, z2 = cache
    g = relu_backward(z2, grad_out)
    g, gk, gb = conv2d_backward(a1, tensors[f"{prefix}.conv2.w"], g)
    grads[f"{prefix}.conv2.w"] = gk
    grads[f"{prefix}.conv2.b"] = gb
    g = relu_backward(z1, g)
    g, gk, gb = conv2d_backward(x, tensors[f"{prefix}.conv1.w"], g)
    grads[f"{prefix}.conv1.w"] = gk
    grads[f"{prefix}.conv1.b"] = gb
    return g


def unet_forward_cached(params: UNetParams, x: np.ndarray):
    """Forward pass keeping every intermediate needed by the backward pass."""
    cfg = params.config
    n, ci, h, w = x.shape
    if ci != cfg.in_channels:
        raise ValueError(f"input has {ci} channels, config expects {cfg.in_channels}")
    m = cfg.spatial_multiple
    if h % m or w % m:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {m}")
    t = params.tensors

    enc_caches = []
    pool_args = []
    skips = []
    cur = x
    for i in range(cfg.depth):
        cur, cache = _double_conv(t, f"enc{i}", cur)
        enc_caches.append(cache)
        if i < cfg.depth - 1:
            skips.append(cur)
            cur, argmax = maxpool2d_forward(cur)
            pool_args.append(argmax)

    dec_caches = []
    up_inputs = []
    for i in reversed(range(cfg.depth - 1)):
        up_inputs.append(cur)
        up = upconv2d_forward(cur, t[f"up{i}.w"], t[f"up{i}.b"])
        cur = concat_channels(skips[i], up)
        cur, cache = _double_conv(t, f"dec{i}", cur)
        dec_caches.append(cache)

    head_in = cur
    out = conv2d_forward(cur, t["head.w"], t["head.b"])
    return out, (enc_caches, pool_args, dec_caches, up_inputs, head_in)


def unet_forward(params: UNetParams, x: np.ndarray) -> np.ndarray:
    """Run the network; output spatial dims equal the (aligned) input dims."""
    out, _ = unet_forward_cached(params, x)
    return out


def unet_backward_cached(params: UNetParams, cache, grad_out: np.ndarray):
    cfg = params.config
    t = params.tensors
    enc_caches, pool_args, dec_caches, up_inputs, head_in = cache

    grads: dict[str, np.ndarray] = {}
    g, gk, gb = conv2d_backward(head_in, t["head.w"], grad_out)
    grads["head.w"] = gk
    grads["head.b"] = gb

    enc_grads = {}  # gradient flowing into each skip connection
    levels = list(reversed(range(cfg.depth - 1)))
    for pos in reversed(range(len(levels))):
        i = levels[pos]
        g = _double_conv_backward(t, f"dec{i}", dec_caches[pos], g, grads)
        skip_c = cfg.level_channels(i)
        g_skip, g_up = split_channels(g, skip_c)
        enc_grads[i] = g_skip
        g, gk, gb = upconv2d_backward(up_inputs[pos], t[f"up{i}.w"], g_up)
        grads[f"up{i}.w"] = gk
        grads[f"up{i}.b"] = gb

    for i in reversed(range(cfg.depth)):
        if i < cfg.depth - 1:
            g = maxpool2d_backward(pool_args[i], g)
            g = g + enc_grads[i]
        g = _double_conv_backward(t, f"enc{i}", enc_caches[i], g, grads)

    # reorder to canonical parameter order
    grads = {name: grads[name] for name in params.tensors}
    return grads, g


def unet_backward(params: UNetParams, x: np.ndarray, grad_out: np.ndarray):
    """Full-network gradients of sum(grad_out * unet_forward(params, x)).

    Returns (parameter gradient dict mirroring params.tensors, input gradient).
    """
    out, cache = unet_forward_cached(params, x)
    if grad_out.shape != out.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != output {out.shape}")
    return unet_backward_cached(params, cache, grad_out)


# ---------------------------------------------------------------------------
# checkpoint format UNP1

def save_params(params: UNetParams, path: str | Path) -> Path:
    """Write a UNP1 checkpoint.

    Layout (little-endian): magic "UNP1", u16 version, u16 depth, u32
    in_channels, u32 out_channels, u32 base_channels, u8 normalize, u32 tensor
    count; then per tensor: u16 name length + UTF-8 name, u8 rank, rank*u32
    dims, raw float32 values.
    """
    cfg = params.config
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(
            struct.pack(
                "<HHIIIBI",
                CKPT_VERSION,
                cfg.depth,
                cfg.in_channels,
                cfg.out_channels,
                cfg.base_channels,
                int(cfg.normalize),
                len(params.tensors),
            )
        )
        for name, arr in params.tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_params(path: str | Path) -> UNetParams:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a UNP1 checkpoint")
        version, depth, ci, co, base, normalize, count = struct.unpack(
            "<HHIIIBI", f.read(21)
        )
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = UNetConfig(depth, ci, co, base, bool(normalize))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims))
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
            tensors[name] = data.astype(np.float32)
    params = UNetParams(cfg, tensors)
    expected = _param_shapes(cfg)
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise ValueError(f"checkpoint tensors do not match config {cfg}")
    return params
