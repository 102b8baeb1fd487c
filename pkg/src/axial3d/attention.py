"""Shared-embedding 3D axial attention and the full non-local reference.

Public functions take the channel-first layout ``C x Z x W x H`` of a single
volume.  The ``*_cl`` functions are the batched channels-last versions used
by the network; they work on ``(B, Z, W, H, C)`` arrays and come with
explicit backward passes.

Positional vectors are stored per axis as ``D x extent`` matrices.  The
encoding at depth ``i``, width ``u`` and height ``j`` is
``r_z[:, i] + r_w[:, u] + r_h[:, j]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import ShapeError

LN_EPS = 1e-5

# Scores per chunk for the fiber kernel; keeps the L x L blocks cache-resident.
_CHUNK_SCORES = 1 << 16

# Test hook for the verification suite: added to every fiber-kernel output.
_kernel_perturbation = 0.0


def set_kernel_perturbation(value: float) -> None:
    global _kernel_perturbation
    _kernel_perturbation = float(value)


@dataclass
class EmbeddingWeights:
    w_q: np.ndarray
    w_k: np.ndarray | None = None
    w_v: np.ndarray | None = None

    def __post_init__(self):
        self.w_q = tc.as_tensor(self.w_q)
        if self.w_q.ndim != 2:
            raise ShapeError(f"w_q must be D x C, got {self.w_q.shape}")
        for name in ("w_k", "w_v"):
            w = getattr(self, name)
            if w is not None:
                w = tc.as_tensor(w)
                if w.shape != self.w_q.shape:
                    raise ShapeError(f"{name} shape {w.shape} != w_q shape {self.w_q.shape}")
                setattr(self, name, w)

    @property
    def d(self) -> int:
        return self.w_q.shape[0]


@dataclass
class PositionalVectors:
    r_z: np.ndarray
    r_w: np.ndarray
    r_h: np.ndarray

    def __post_init__(self):
        self.r_z = tc.as_tensor(self.r_z)
        self.r_w = tc.as_tensor(self.r_w)
        self.r_h = tc.as_tensor(self.r_h)
        ds = {r.shape[0] for r in (self.r_z, self.r_w, self.r_h)}
        if len(ds) != 1 or any(r.ndim != 2 for r in (self.r_z, self.r_w, self.r_h)):
            raise ShapeError("positional vectors must all be D x extent with one D")

    @property
    def d(self) -> int:
        return self.r_z.shape[0]

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.r_z.shape[1], self.r_w.shape[1], self.r_h.shape[1]

    @classmethod
    def zeros(cls, d: int, z: int, w: int, h: int) -> "PositionalVectors":
        return cls(np.zeros((d, z)), np.zeros((d, w)), np.zeros((d, h)))


@dataclass
class AxialLayerParams:
    """Weights of one axial attention layer.

    ``norm_over`` selects the normalization group: ``"channel"`` standardizes
    the C values at each voxel, ``"volume"`` standardizes all C*Z*W*H values
    of a sample (needed when C == 1, where per-voxel statistics are empty).
    """

    embed: EmbeddingWeights
    pos: PositionalVectors
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    norm_over: str = "channel"
    d: int = field(init=False)

    def __post_init__(self):
        self.norm_gain = tc.as_tensor(self.norm_gain)
        self.norm_bias = tc.as_tensor(self.norm_bias)
        self.d = self.embed.d
        if self.pos.d != self.d:
            raise ShapeError(f"positional D={self.pos.d} but embedding D={self.d}")
        c = self.embed.w_q.shape[1]
        if self.norm_gain.shape != (c,) or self.norm_bias.shape != (c,):
            raise ShapeError(f"norm gain/bias must have length C={c}")
        if self.norm_over not in ("channel", "volume"):
            raise ValueError(f"norm_over must be 'channel' or 'volume', got {self.norm_over!r}")

    @property
    def in_channels(self) -> int:
        return self.embed.w_q.shape[1]

    @property
    def residual(self) -> bool:
        return self.in_channels == self.d


# ---------------------------------------------------------------------------
# channels-last building blocks (batched, with backward)
# ---------------------------------------------------------------------------

def _norm_axes(x_cl: np.ndarray, over: str) -> tuple[int, ...]:
    if over == "channel":
        return (-1,)
    return tuple(range(1, x_cl.ndim))


def layer_norm_cl(x, gain, bias, over="channel"):
    axes = _norm_axes(x, over)
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, axes)


def layer_norm_backward_cl(dy, cache, gain):
    xhat, rstd, axes = cache
    sum_axes = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=sum_axes)
    dbias = np.sum(dy, axis=sum_axes)
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=axes, keepdims=True)
    )
    return dx, dgain, dbias


def positional_cl(pos: PositionalVectors) -> np.ndarray:
    """Encoding as a ``(Z, W, H, D)`` array."""
    return (
        pos.r_z.T[:, None, None, :]
        + pos.r_w.T[None, :, None, :]
        + pos.r_h.T[None, None, :, :]
    )


def _chunks(m: int, length: int):
    step = max(1, _CHUNK_SCORES // (length * length))
    for s in range(0, m, step):
        yield slice(s, min(m, s + step))


def _fiber_weights(f: np.ndarray) -> np.ndarray:
    s = tc.matmul(f, np.swapaxes(f, -1, -2))
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def fiber_attention(f: np.ndarray, keep_weights: bool = False):
    """Self-attention within each fiber of an ``(M, L, D)`` stack.

    Row ``l`` of the weight matrix is the softmax over ``l'`` of
    ``f[l] . f[l']``; output ``l`` is the weighted sum of the fiber positions.
    With ``keep_weights`` the ``(M, L, L)`` weights are returned as well.
    """
    m, length, _ = f.shape
    out = np.empty_like(f)
    weights = np.empty((m, length, length)) if keep_weights else None
    for sl in _chunks(m, length):
        g = f[sl]
        a = _fiber_weights(g)
        out[sl] = tc.matmul(a, g)
        if keep_weights:
            weights[sl] = a
    if _kernel_perturbation:
        out += _kernel_perturbation
    if keep_weights:
        return out, weights
    return out


def fiber_attention_backward(f: np.ndarray, dout: np.ndarray,
                             weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient w.r.t. the fibers; ``weights`` from the forward pass are reused when given."""
    m, length, _ = f.shape
    df = np.empty_like(f)
    for sl in _chunks(m, length):
        g = f[sl]
        do = dout[sl]
        a = _fiber_weights(g) if weights is None else weights[sl]
        ds = tc.matmul(do, np.swapaxes(g, -1, -2))
        ds -= np.einsum("mij,mij->mi", ds, a)[..., None]
        ds *= a
        ds = ds + np.swapaxes(ds, -1, -2)
        df[sl] = tc.matmul(np.swapaxes(a, -1, -2), do) + tc.matmul(ds, g)
    return df


def _to_fibers(h: np.ndarray, axis: int) -> tuple[np.ndarray, tuple[int, ...]]:
    moved = np.moveaxis(h, axis, -2)
    shape = moved.shape
    return np.ascontiguousarray(moved).reshape(-1, shape[-2], shape[-1]), shape


def _from_fibers(f: np.ndarray, shape: tuple[int, ...], axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(f.reshape(shape), -2, axis))


def attend_cl(h: np.ndarray, axis: int, keep: bool = False):
    """Attend along spatial ``axis`` of a channels-last array.

    With ``keep`` also returns ``(fibers, weights)`` for the backward pass.
    """
    f, shape = _to_fibers(h, axis)
    if not keep:
        return _from_fibers(fiber_attention(f), shape, axis)
    out, weights = fiber_attention(f, keep_weights=True)
    return _from_fibers(out, shape, axis), (f, weights)


def attend_backward_cl(saved, dout: np.ndarray, axis: int) -> np.ndarray:
    f, weights = saved
    do, shape = _to_fibers(dout, axis)
    return _from_fibers(fiber_attention_backward(f, do, weights), shape, axis)


# Height, then width, then depth; spatial axes of (B, Z, W, H, D).
STAGE_AXES = (3, 2, 1)


def axial_stages_cl(h: np.ndarray, keep: bool = False):
    saved = []
    t = h
    for axis in STAGE_AXES:
        if keep:
            t, s = attend_cl(t, axis, keep=True)
            saved.append(s)
        else:
            t = attend_cl(t, axis)
    return t, saved


def axial_layer_forward_cl(x: np.ndarray, params: AxialLayerParams, residual: bool = True,
                           keep: bool = False):
    """One axial layer on a ``(B, Z, W, H, C)`` batch; returns ``(out, cache)``.

    The cache is only filled when ``keep`` is set.
    """
    if x.shape[1:4] != params.pos.extent:
        raise ShapeError(
            f"input spatial extent {x.shape[1:4]} != layer extent {params.pos.extent}"
        )
    if x.shape[-1] != params.in_channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, layer expects {params.in_channels}")
    n, ln_cache = layer_norm_cl(x, params.norm_gain, params.norm_bias, params.norm_over)
    h = tc.matmul(n.reshape(-1, n.shape[-1]), params.embed.w_q.T).reshape(x.shape[:-1] + (params.d,))
    h += positional_cl(params.pos)
    out, saved = axial_stages_cl(h, keep=keep)
    if residual and params.residual:
        out = out + x
    if not keep:
        return out, None
    return out, (n, ln_cache, saved)


def axial_layer_backward_cl(dout: np.ndarray, cache, params: AxialLayerParams):
    """Returns ``(dx, grads)`` with grads keyed like the layer's parameters."""
    n, ln_cache, saved = cache
    dt = dout
    for axis, s in zip(reversed(STAGE_AXES), reversed(saved)):
        dt = attend_backward_cl(s, dt, axis)
    dh = dt
    grads = {
        "r_z": dh.sum(axis=(0, 2, 3)).T.copy(),
        "r_w": dh.sum(axis=(0, 1, 3)).T.copy(),
        "r_h": dh.sum(axis=(0, 1, 2)).T.copy(),
    }
    dh2 = dh.reshape(-1, params.d)
    n2 = n.reshape(-1, n.shape[-1])
    grads["w_q"] = tc.matmul(dh2.T, n2)
    dn = tc.matmul(dh2, params.embed.w_q).reshape(n.shape)
    dx, grads["norm_gain"], grads["norm_bias"] = layer_norm_backward_cl(
        dn, ln_cache, params.norm_gain
    )
    if params.residual:
        dx = dx + dout
    return dx, grads


# ---------------------------------------------------------------------------
# single-volume, channel-first API
# ---------------------------------------------------------------------------

def _to_cl(x: np.ndarray) -> np.ndarray:
    return np.moveaxis(tc.as_tensor(x), 0, -1)[None]


def _from_cl(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x[0], -1, 0))


def layer_norm(x, gain, bias, over: str = "channel") -> np.ndarray:
    """Layer normalization of a ``C x Z x W x H`` volume.

    Statistics are taken per voxel across channels (``over="channel"``) or
    across the whole volume (``over="volume"``); the affine step is per
    channel.
    """
    x = tc.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected C x Z x W x H, got {x.shape}")
    gain = tc.as_tensor(gain)
    bias = tc.as_tensor(bias)
    if gain.shape != (x.shape[0],) or bias.shape != (x.shape[0],):
        raise ShapeError("gain and bias must have length C")
    y, _ = layer_norm_cl(_to_cl(x), gain, bias, over)
    return _from_cl(y)


def embed(x, w) -> np.ndarray:
    """Per-voxel linear map across channels (a 1x1x1 convolution)."""
    x = tc.as_tensor(x)
    w = tc.as_tensor(w)
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"weight {w.shape} does not map {x.shape[0]} channels")
    flat = x.reshape(x.shape[0], -1)
    return tc.matmul(w, flat).reshape((w.shape[0],) + x.shape[1:])


def build_positional_encoding(pos: PositionalVectors) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(positional_cl(pos), -1, 0))


def shared_embedding(x, params: AxialLayerParams) -> np.ndarray:
    x = tc.as_tensor(x)
    if x.shape[1:] != params.pos.extent:
        raise ShapeError(f"input extent {x.shape[1:]} != layer extent {params.pos.extent}")
    n = layer_norm(x, params.norm_gain, params.norm_bias, params.norm_over)
    return embed(n, params.embed.w_q) + build_positional_encoding(params.pos)


def axis_attention(t) -> np.ndarray:
    """Attend along the last axis of a ``D x ... x L`` tensor."""
    t = tc.as_tensor(t)
    if t.ndim < 2:
        raise ShapeError("axis_attention needs a leading embedding axis")
    f = np.moveaxis(t, 0, -1)
    shape = f.shape
    out = fiber_attention(np.ascontiguousarray(f).reshape(-1, shape[-2], shape[-1]))
    return np.ascontiguousarray(np.moveaxis(out.reshape(shape), -1, 0))


def axial_attention_3d(x, params: AxialLayerParams, residual: bool = True) -> np.ndarray:
    """Full 3D axial layer on one ``C x Z x W x H`` volume -> ``D x Z x W x H``.

    With ``residual=False`` the identity shortcut is left out even when the
    channel counts match.
    """
    x = tc.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected C x Z x W x H, got {x.shape}")
    out, _ = axial_layer_forward_cl(_to_cl(x), params, residual=residual)
    return _from_cl(out)


def nonlocal_full(x, w: EmbeddingWeights, shared: bool = True,
                  positional: np.ndarray | None = None,
                  return_weights: bool = False):
    """Attention over all N = Z*W*H voxels at once; the O(N^2) reference.

    Output voxel ``i`` is ``sum_j softmax_j(q_i . k_j) v_j``.  In shared mode
    q = k = v = ``w.w_q x`` (+ ``positional`` when given).  Otherwise the
    optional encoding is added to queries and keys only.
    """
    x = tc.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected C x Z x W x H, got {x.shape}")
    q = embed(x, w.w_q)
    if positional is not None:
        positional = tc.as_tensor(positional)
        if positional.shape != q.shape:
            raise ShapeError(f"positional shape {positional.shape} != embedding {q.shape}")
        q = q + positional
    if shared:
        k = v = q
    else:
        if w.w_k is None or w.w_v is None:
            raise ShapeError("non-shared mode needs w_k and w_v")
        k = embed(x, w.w_k)
        if positional is not None:
            k = k + positional
        v = embed(x, w.w_v)
    d = q.shape[0]
    out, weights = nonlocal_attend(q.reshape(d, -1), k.reshape(d, -1), v.reshape(d, -1))
    out = out.reshape(q.shape)
    if return_weights:
        return out, weights
    return out


def nonlocal_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Attention proper on ``D x N`` embeddings; returns ``(D x N out, N x N weights)``.

    ``weights[i, j]`` is the share of source ``j`` in output ``i``.
    """
    weights = tc.softmax(tc.matmul(q.T, k), axis=1)
    return tc.matmul(v, weights.T), weights
