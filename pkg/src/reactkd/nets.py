"""Forward-only numpy versions of the encoder building blocks, plus the trainable linear head.

Layout conventions: feature volumes are ``(C, D, H, W)``; token grids for
attention are ``(D, H, W, C)``; a flat window of tokens is ``(N_w, C)`` with
``N_w = P * M * M`` in raster order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from .errors import FormatError, ShapeMismatchError

IN_EPS = 1e-5
LN_EPS = 1e-5


# ------------------------------------------------------------- primitives


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def relu(x):
    return np.maximum(x, 0.0)


def layer_norm(x, gain, offset, eps: float = LN_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + offset


def instance_norm(x, eps: float = IN_EPS):
    """Per-channel normalisation over the spatial axes of a (C, D, H, W) volume."""
    axes = (1, 2, 3)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def conv3d(x, weight, bias=None, stride: int = 1, padding=None):
    """3D cross-correlation of ``x`` (C_in, D, H, W) with ``weight`` (C_out, C_in, k, k, k).

    Zero padding defaults to ``k // 2``; output size per axis is
    ``(n + 2 * padding - k) // stride + 1`` (for k = 3, stride 2: ``ceil(n / 2)``).
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 4 or weight.ndim != 5 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"conv3d: input {x.shape} incompatible with kernel {weight.shape}")
    kd, kh, kw = weight.shape[2:]
    pad = (kd // 2, kh // 2, kw // 2) if padding is None else (padding,) * 3
    xp = np.pad(x, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    out_dims = [(n + 2 * p - k) // stride + 1 for n, p, k in zip(x.shape[1:], pad, (kd, kh, kw))]
    if min(out_dims) <= 0:
        raise ShapeMismatchError(f"conv3d: input {x.shape} too small for kernel {weight.shape}")
    od, oh, ow = out_dims
    # im2col: one (C_in * k^3, voxels) patch matrix, one matmul
    cols = np.empty((x.shape[0], kd, kh, kw, od * oh * ow))
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                cols[:, dz, dy, dx] = xp[
                    :,
                    dz : dz + stride * (od - 1) + 1 : stride,
                    dy : dy + stride * (oh - 1) + 1 : stride,
                    dx : dx + stride * (ow - 1) + 1 : stride,
                ].reshape(x.shape[0], -1)
    out = (weight.reshape(weight.shape[0], -1) @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape[0], *out_dims)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None, None]
    return out


# ------------------------------------------------------------- attention


@dataclass(frozen=True)
class AttentionParams:
    """One transformer block: window attention plus its MLP and two LayerNorms."""

    w_q: np.ndarray  # (C, d)
    w_k: np.ndarray
    w_v: np.ndarray
    bias_table: np.ndarray  # ((2P-1)(2M-1)(2M-1), heads)
    window: tuple  # (P, M, M)
    heads: int
    w_o: np.ndarray = None  # (d, C); None means identity (requires d == C)
    mlp: tuple = None  # (W1 (C, h), b1 (h,), W2 (h, C), b2 (C,))
    norm1: tuple = None  # (gain, offset), each (C,)
    norm2: tuple = None

    def __post_init__(self):
        d = self.w_q.shape[1]
        if d % self.heads:
            raise ShapeMismatchError(f"attention width {d} not divisible by {self.heads} heads")
        if self.w_o is None and d != self.w_q.shape[0]:
            raise ShapeMismatchError("w_o may only be omitted when d equals the token width")
        P, M1, M2 = self.window
        n_rel = (2 * P - 1) * (2 * M1 - 1) * (2 * M2 - 1)
        if self.bias_table.shape != (n_rel, self.heads):
            raise ShapeMismatchError(f"bias table shape {self.bias_table.shape}, expected {(n_rel, self.heads)}")

    @property
    def window_volume(self) -> int:
        return int(np.prod(self.window))


def relative_position_index(window) -> np.ndarray:
    """(N_w, N_w) index into the bias table for every query/key pair of a window."""
    P, M1, M2 = window
    coords = np.stack(np.meshgrid(np.arange(P), np.arange(M1), np.arange(M2), indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + np.array([P - 1, M1 - 1, M2 - 1])[:, None, None]
    return rel[0] * (2 * M1 - 1) * (2 * M2 - 1) + rel[1] * (2 * M2 - 1) + rel[2]


def relative_position_bias(p: AttentionParams) -> np.ndarray:
    """Bias ``B`` per head, shape (heads, N_w, N_w)."""
    idx = relative_position_index(p.window)
    return np.transpose(p.bias_table[idx], (2, 0, 1))


def shift_sizes(window) -> tuple:
    return tuple(w // 2 for w in window)


def _partition(grid, window):
    D, H, W, C = grid.shape
    P, M1, M2 = window
    x = grid.reshape(D // P, P, H // M1, M1, W // M2, M2, C)
    return x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, P * M1 * M2, C)


def _reverse(windows, window, dims):
    D, H, W = dims
    P, M1, M2 = window
    C = windows.shape[-1]
    x = windows.reshape(D // P, H // M1, W // M2, P, M1, M2, C)
    return x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(D, H, W, C)


def shifted_region_ids(dims, window) -> np.ndarray:
    """Region id of every position of the cyclically shifted grid.

    After rolling by ``-shift``, positions in the last window along an axis
    mix two sources: ``[n - w, n - s)`` and ``[n - s, n)``.  Tokens may only
    attend within the same region.
    """
    ids = np.zeros(dims, dtype=np.int64)
    shifts = shift_sizes(window)
    for axis, (n, w, s) in enumerate(zip(dims, window, shifts)):
        part = np.zeros(n, dtype=np.int64)
        if s > 0:
            part[n - w : n - s] = 1
            part[n - s :] = 2
        shape = [1, 1, 1]
        shape[axis] = n
        ids = ids * 3 + part.reshape(shape)
    return ids


def window_attention(grid, p: AttentionParams, shifted: bool = False, return_weights: bool = False):
    """(S)W-MSA over a (D, H, W, C) token grid whose dims are multiples of the window.

    Scores are ``Q K^T / sqrt(d_head) + B``; ``d_head = d`` with a single head.
    Masked pairs get ``-inf`` before the softmax, so their weight is exactly 0.
    """
    grid = np.asarray(grid, dtype=np.float64)
    dims = grid.shape[:3]
    if any(n % w for n, w in zip(dims, p.window)):
        raise ShapeMismatchError(f"grid dims {dims} not multiples of window {p.window}")
    shifts = shift_sizes(p.window)
    if shifted:
        grid = np.roll(grid, shift=tuple(-s for s in shifts), axis=(0, 1, 2))
    tokens = _partition(grid, p.window)  # (nW, N, C)
    n_win, N, _ = tokens.shape
    d = p.w_q.shape[1]
    dh = d // p.heads

    def heads(m):
        return (tokens @ m).reshape(n_win, N, p.heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(p.w_q), heads(p.w_k), heads(p.w_v)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + relative_position_bias(p)[None]
    if shifted:
        ids = _partition(shifted_region_ids(dims, p.window)[..., None], p.window)[..., 0]
        blocked = ids[:, :, None] != ids[:, None, :]
        scores = np.where(blocked[:, None], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(n_win, N, d)
    if p.w_o is not None:
        out = out @ p.w_o
    out = _reverse(out, p.window, dims)
    if shifted:
        out = np.roll(out, shift=shifts, axis=(0, 1, 2))
    return (out, weights) if return_weights else out


def _as_window_grid(tokens, p: AttentionParams):
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] != p.window_volume:
        raise ShapeMismatchError(f"{tokens.shape[0] if tokens.ndim else 0} tokens for a window of {p.window_volume}")
    return tokens.reshape(*p.window, tokens.shape[1])


def wmsa_forward(tokens, p: AttentionParams, shifted: bool = False, return_weights: bool = False):
    """Attention over one window of tokens, shape (N_w, C) -> (N_w, C)."""
    grid = _as_window_grid(tokens, p)
    res = window_attention(grid, p, shifted, return_weights)
    if return_weights:
        out, weights = res
        return out.reshape(tokens.shape), weights[0]
    return res.reshape(np.shape(tokens))


def mlp_forward(x, mlp):
    w1, b1, w2, b2 = mlp
    return gelu(x @ w1 + b1) @ w2 + b2


def _transformer_step(z, p, shifted):
    grid = z.ndim == 4
    attn = window_attention if grid else wmsa_forward
    z_hat = attn(layer_norm(z, *p.norm1), p, shifted) + z
    return mlp_forward(layer_norm(z_hat, *p.norm2), p.mlp) + z_hat


def swin_block_forward(tokens, p: AttentionParams, p_shifted: AttentionParams = None):
    """Regular-window block followed by a shifted-window block, each pre-norm with residuals.

    ``tokens`` is either one window (N_w, C) or a token grid (D, H, W, C).
    The shifted block uses ``p_shifted`` (its own weights); ``None`` reuses ``p``.
    """
    z = np.asarray(tokens, dtype=np.float64)
    z = _transformer_step(z, p, shifted=False)
    return _transformer_step(z, p if p_shifted is None else p_shifted, shifted=True)


# ------------------------------------------------------------- residual conv


@dataclass(frozen=True)
class ResUnitParams:
    conv1: np.ndarray  # (C_mid, C, 3, 3, 3)
    conv2: np.ndarray  # (C, C_mid, 3, 3, 3)
    bias1: np.ndarray = None
    bias2: np.ndarray = None
    down: np.ndarray = None  # (C_down, C, 3, 3, 3), applied with stride 2
    down_bias: np.ndarray = None
    reduce: np.ndarray = None  # (C_red, C_down, 1, 1, 1)
    reduce_bias: np.ndarray = None

    def __post_init__(self):
        c_mid, c = self.conv1.shape[:2]
        if self.conv2.shape[:2] != (c, c_mid):
            raise ShapeMismatchError(f"conv2 {self.conv2.shape} does not chain with conv1 {self.conv1.shape}")
        if self.down is not None and self.down.shape[1] != c:
            raise ShapeMismatchError("downsampling kernel input channels do not match")
        if self.reduce is not None and self.down is not None and self.reduce.shape[1] != self.down.shape[0]:
            raise ShapeMismatchError("reduction kernel input channels do not match")


def resunit_forward(f, p: ResUnitParams):
    """``F + Conv(ReLU(IN(Conv(F))))``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 4 or f.shape[0] != p.conv1.shape[1]:
        raise ShapeMismatchError(f"resunit: input {f.shape} vs conv1 {p.conv1.shape}")
    z = relu(instance_norm(conv3d(f, p.conv1, p.bias1)))
    return f + conv3d(z, p.conv2, p.bias2)


def downsample_reduce(f, p: ResUnitParams):
    """Stride-2 3x3x3 convolution (spatial dims -> ceil(n / 2)) then 1x1x1 channel reduction."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 4 or min(f.shape[1:]) < 2:
        raise ShapeMismatchError(f"downsample_reduce: spatial dims {f.shape[1:]} must all be >= 2")
    out = f
    if p.down is not None:
        out = conv3d(out, p.down, p.down_bias, stride=2)
    if p.reduce is not None:
        out = conv3d(out, p.reduce, p.reduce_bias, padding=0)
    return out


# ------------------------------------------------------------------- CBAM


@dataclass(frozen=True)
class CbamParams:
    w1: np.ndarray  # (C // r, C)
    w2: np.ndarray  # (C, C // r)
    spatial: np.ndarray  # (1, 2, k, k, k)
    b1: np.ndarray = None
    b2: np.ndarray = None
    spatial_bias: float = 0.0

    def __post_init__(self):
        hidden, c = self.w1.shape
        if self.w2.shape != (c, hidden):
            raise ShapeMismatchError(f"CBAM MLP shapes {self.w1.shape} / {self.w2.shape} do not chain")
        if self.spatial.shape[:2] != (1, 2):
            raise ShapeMismatchError(f"spatial kernel must be (1, 2, k, k, k), got {self.spatial.shape}")


def channel_gate(f, p: CbamParams):
    """Sigmoid of the shared MLP applied to avg- and max-pooled descriptors, summed."""

    def mlp(v):
        h = p.w1 @ v + (0.0 if p.b1 is None else p.b1)
        return p.w2 @ relu(h) + (0.0 if p.b2 is None else p.b2)

    flat = f.reshape(f.shape[0], -1)
    return expit(mlp(flat.mean(axis=1)) + mlp(flat.max(axis=1)))


def spatial_gate(f, p: CbamParams):
    pooled = np.stack([f.mean(axis=0), f.max(axis=0)])
    return expit(conv3d(pooled, p.spatial)[0] + p.spatial_bias)


def cbam3d_forward(f, p: CbamParams, return_gates: bool = False):
    """Channel gating then spatial gating of a (C, D, H, W) volume."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 4 or f.shape[0] != p.w1.shape[1]:
        raise ShapeMismatchError(f"CBAM: input {f.shape} vs MLP {p.w1.shape}")
    gc = channel_gate(f, p)
    x = f * gc[:, None, None, None]
    gs = spatial_gate(x, p)
    out = x * gs[None]
    return (out, gc, gs) if return_gates else out


# ------------------------------------------------------------------- head


@dataclass
class StudentHead:
    """Affine map from a graph-statistics vector to class logits."""

    weight: np.ndarray  # (n_classes, n_inputs)
    bias: np.ndarray  # (n_classes,)

    @classmethod
    def init(cls, n_inputs: int, n_classes: int = 3, seed: int = 0, scale: float = 0.01):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(n_classes, n_inputs)), np.zeros(n_classes))

    def copy(self) -> "StudentHead":
        return StudentHead(self.weight.copy(), self.bias.copy())


def student_head_forward(graph_stats, head: StudentHead):
    x = np.asarray(graph_stats, dtype=np.float64)
    if x.shape != (head.weight.shape[1],):
        raise ShapeMismatchError(f"head expects {head.weight.shape[1]} inputs, got {x.shape}")
    return head.weight @ x + head.bias


def student_head_backward(graph_stats, grad_logits):
    """Parameter gradients of an upstream loss given its gradient on the logits."""
    x = np.asarray(graph_stats, dtype=np.float64)
    g = np.asarray(grad_logits, dtype=np.float64)
    return {"weight": np.outer(g, x), "bias": g.copy()}


# ---------------------------------------------------------- initialisation


def init_attention_params(channels, window, heads=1, width=None, hidden=None, rng=None, scale=0.2):
    rng = np.random.default_rng(rng)
    d = channels if width is None else width
    hidden = 2 * channels if hidden is None else hidden
    P, M1, M2 = window
    n_rel = (2 * P - 1) * (2 * M1 - 1) * (2 * M2 - 1)
    return AttentionParams(
        w_q=rng.normal(0, scale, (channels, d)),
        w_k=rng.normal(0, scale, (channels, d)),
        w_v=rng.normal(0, scale, (channels, d)),
        bias_table=np.zeros((n_rel, heads)),
        window=tuple(window),
        heads=heads,
        w_o=rng.normal(0, scale, (d, channels)),
        mlp=(
            rng.normal(0, scale, (channels, hidden)),
            np.zeros(hidden),
            rng.normal(0, scale, (hidden, channels)),
            np.zeros(channels),
        ),
        norm1=(np.ones(channels), np.zeros(channels)),
        norm2=(np.ones(channels), np.zeros(channels)),
    )


def init_resunit_params(channels, mid=None, down=None, reduced=None, rng=None):
    """He-scaled random kernels; ``down``/``reduced`` add the downsampling path."""
    rng = np.random.default_rng(rng)
    mid = channels if mid is None else mid

    def kernel(c_out, c_in, k):
        return rng.normal(0.0, np.sqrt(2.0 / (c_in * k**3)), (c_out, c_in, k, k, k))

    kwargs = {}
    if down is not None:
        kwargs["down"] = kernel(down, channels, 3)
        kwargs["down_bias"] = np.zeros(down)
        if reduced is not None:
            kwargs["reduce"] = kernel(reduced, down, 1)
            kwargs["reduce_bias"] = rng.normal(0.0, 0.1, reduced)
    return ResUnitParams(
        conv1=kernel(mid, channels, 3),
        conv2=kernel(channels, mid, 3),
        bias1=np.zeros(mid),
        bias2=np.zeros(channels),
        **kwargs,
    )


def init_cbam_params(channels, reduction=2, kernel_size=7, rng=None):
    rng = np.random.default_rng(rng)
    if channels % reduction:
        raise ShapeMismatchError(f"reduction ratio {reduction} does not divide {channels} channels")
    hidden = channels // reduction
    k = kernel_size
    return CbamParams(
        w1=rng.normal(0, np.sqrt(2.0 / channels), (hidden, channels)),
        w2=rng.normal(0, np.sqrt(1.0 / hidden), (channels, hidden)),
        spatial=rng.normal(0, np.sqrt(1.0 / (2 * k**3)), (1, 2, k, k, k)),
        b1=np.zeros(hidden),
        b2=np.zeros(channels),
    )


# ------------------------------------------------------------ serialisation


def params_to_json(params) -> dict:
    """Flatten a parameter dataclass into ``{name: {"shape": [...], "data": [...]}}``."""
    flat = {}

    def put(name, value):
        if value is None:
            return
        if isinstance(value, (tuple, list)) and value and isinstance(value[0], np.ndarray):
            for i, item in enumerate(value):
                put(f"{name}.{i}", item)
            return
        arr = np.asarray(value)
        flat[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}

    for f in dataclasses.fields(params):
        put(f.name, getattr(params, f.name))
    return flat


def params_from_json(cls, payload: dict):
    """Inverse of :func:`params_to_json` for the parameter dataclasses above."""
    grouped: dict = {}
    try:
        for name, entry in payload.items():
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            base, _, idx = name.partition(".")
            if idx:
                grouped.setdefault(base, {})[int(idx)] = arr
            else:
                grouped[base] = arr
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed parameter file: {exc}") from exc
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in grouped:
            continue
        value = grouped[f.name]
        if isinstance(value, dict):
            value = tuple(value[i] for i in sorted(value))
        elif f.name == "window":
            value = tuple(int(v) for v in value)
        elif f.name == "heads":
            value = int(value)
        elif f.name == "spatial_bias":
            value = float(value)
        kwargs[f.name] = value
    return cls(**kwargs)
