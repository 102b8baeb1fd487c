"""The full classifier: axial layers, max pooling, dropout and a sigmoid head.

The default stack has two axial layers at 32^3, a 2x pool, four axial
layers at 16^3, a 4x pool and a fully connected output on the
32 x 4 x 4 x 4 = 2048 pooled features.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import attention as att
from . import tensor_core as tc
from .optim import xavier_init
from .streams import stream
from .tensor_core import ShapeError

DEFAULT_D_SIZES = (8, 16, 16, 16, 16, 32)
INPUT_SHAPE = (1, 32, 32, 32)
DROPOUT_P = 0.5


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    d: int = 0
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: int = 1
    in_features: int = 0
    out_features: int = 1
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("axial", "maxpool", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "axial" and self.d < 1:
            raise ValueError("axial layer needs d >= 1")
        if self.kind == "maxpool" and (self.stride < 1 or min(self.kernel) < 1):
            raise ValueError("maxpool needs positive kernel and stride")
        if self.kind == "fc" and (self.in_features < 1 or self.out_features < 1):
            raise ValueError("fc layer needs positive feature sizes")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")


def default_specs(d_sizes: Sequence[int] = DEFAULT_D_SIZES) -> list[LayerSpec]:
    d1, d2, d3, d4, d5, d6 = d_sizes
    return [
        LayerSpec("axial", d=d1),
        LayerSpec("axial", d=d2),
        LayerSpec("maxpool", kernel=(2, 2, 2), stride=2),
        LayerSpec("axial", d=d3),
        LayerSpec("axial", d=d4),
        LayerSpec("axial", d=d5),
        LayerSpec("axial", d=d6),
        LayerSpec("maxpool", kernel=(4, 4, 4), stride=4),
        LayerSpec("fc", in_features=d6 * 4 * 4 * 4, out_features=1, dropout_p=DROPOUT_P),
    ]


def layer_shapes(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Output shape (C, Z, W, H) of every layer; the fc entry is ``(out_features,)``."""
    c, z, w, h = input_shape
    shapes = []
    for i, spec in enumerate(specs):
        if spec.kind == "axial":
            c = spec.d
        elif spec.kind == "maxpool":
            if spec.kernel != (spec.stride,) * 3:
                raise ShapeError(f"layer {i}: only kernel == stride pooling is supported")
            if z % spec.stride or w % spec.stride or h % spec.stride:
                raise ShapeError(f"layer {i}: extent {(z, w, h)} not divisible by {spec.stride}")
            z, w, h = z // spec.stride, w // spec.stride, h // spec.stride
        else:
            if i != len(specs) - 1:
                raise ShapeError("fc must be the last layer")
            if spec.in_features != c * z * w * h:
                raise ShapeError(
                    f"fc expects {spec.in_features} features, previous layer gives "
                    f"{c}x{z}x{w}x{h} = {c * z * w * h}"
                )
            shapes.append((spec.out_features,))
            continue
        shapes.append((c, z, w, h))
    if not specs or specs[-1].kind != "fc":
        raise ShapeError("model must end in an fc layer")
    return shapes


class Model:
    """Layer specs plus a flat name -> array parameter store.

    The :class:`~axial3d.attention.AxialLayerParams` objects share memory with
    ``params``, so in-place optimizer updates are seen by the forward pass.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int] = INPUT_SHAPE,
                 rng_seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.rng_seed = int(rng_seed)
        self.shapes = layer_shapes(self.specs, self.input_shape)
        expected = self._param_shapes()
        if params is None:
            params = self._initial_params(expected)
        else:
            params = {k: tc.as_tensor(v) for k, v in params.items()}
            got = {k: v.shape for k, v in params.items()}
            if got != expected:
                raise ShapeError(f"parameter shapes {got} do not match specs {expected}")
        self.params = {k: params[k] for k in expected}
        self._bind_layers()

    def _axial_names(self):
        k = 0
        for i, spec in enumerate(self.specs):
            if spec.kind == "axial":
                k += 1
                yield i, f"axial{k}"

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        prev = {i: (self.input_shape if i == 0 else self.shapes[i - 1]) for i in range(len(self.specs))}
        for i, name in self._axial_names():
            c, z, w, h = prev[i]
            d = self.specs[i].d
            out[f"{name}.w_q"] = (d, c)
            out[f"{name}.r_z"] = (d, z)
            out[f"{name}.r_w"] = (d, w)
            out[f"{name}.r_h"] = (d, h)
            out[f"{name}.norm_gain"] = (c,)
            out[f"{name}.norm_bias"] = (c,)
        fc = self.specs[-1]
        out["fc.weight"] = (fc.out_features, fc.in_features)
        out["fc.bias"] = (fc.out_features,)
        return out

    def _initial_params(self, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
        rng = stream(self.rng_seed, "init")
        params = {}
        for name, shape in shapes.items():
            kind = name.split(".", 1)[1]
            if kind in ("norm_gain",):
                params[name] = np.ones(shape)
            elif kind in ("norm_bias", "bias"):
                params[name] = np.zeros(shape)
            else:
                # D x C embedding, D x extent positional vectors, 1 x F head.
                fan_out, fan_in = shape
                params[name] = xavier_init(shape, fan_in, fan_out, rng)
        return params

    def _bind_layers(self) -> None:
        self.layers: dict[int, att.AxialLayerParams] = {}
        for i, name in self._axial_names():
            p = self.params
            w_q = p[f"{name}.w_q"]
            self.layers[i] = att.AxialLayerParams(
                embed=att.EmbeddingWeights(w_q),
                pos=att.PositionalVectors(p[f"{name}.r_z"], p[f"{name}.r_w"], p[f"{name}.r_h"]),
                norm_gain=p[f"{name}.norm_gain"],
                norm_bias=p[f"{name}.norm_bias"],
                norm_over="volume" if w_q.shape[1] == 1 else "channel",
            )

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    @property
    def dropout_p(self) -> float:
        return self.specs[-1].dropout_p

    @property
    def n_features(self) -> int:
        return self.specs[-1].in_features

    def copy(self) -> "Model":
        return Model(self.specs, self.input_shape, self.rng_seed,
                     {k: v.copy() for k, v in self.params.items()})


def build_model(d_sizes: Sequence[int] = DEFAULT_D_SIZES, seed: int = 0) -> Model:
    return Model(default_specs(d_sizes), INPUT_SHAPE, seed)


# ---------------------------------------------------------------------------
# pooling, dropout, head
# ---------------------------------------------------------------------------

def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    b, z, w, h, c = x.shape
    xr = x.reshape(b, z // k, k, w // k, k, h // k, k, c)
    return xr.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(b, z // k, w // k, h // k, c, k ** 3)


def max_pool_cl(x: np.ndarray, stride: int):
    b, z, w, h, c = x.shape
    if z % stride or w % stride or h % stride:
        raise ShapeError(f"extent {(z, w, h)} not divisible by stride {stride}")
    win = _pool_windows(x, stride)
    idx = np.argmax(win, axis=-1)[..., None]
    return np.take_along_axis(win, idx, axis=-1)[..., 0], (x.shape, idx)


def max_pool_backward_cl(dout: np.ndarray, cache) -> np.ndarray:
    shape, idx = cache
    b, z, w, h, c = shape
    k = z // dout.shape[1]
    dwin = np.zeros(dout.shape + (k ** 3,))
    np.put_along_axis(dwin, idx, dout[..., None], axis=-1)
    dx = dwin.reshape(b, z // k, w // k, h // k, c, k, k, k).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return np.ascontiguousarray(dx).reshape(shape)


def max_pool_3d(x, kernel: Sequence[int], stride: int) -> np.ndarray:
    """Non-overlapping max pooling of a ``C x Z x W x H`` volume."""
    x = tc.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected C x Z x W x H, got {x.shape}")
    if tuple(kernel) != (stride,) * 3:
        raise ShapeError("only kernel == stride pooling is supported")
    out, _ = max_pool_cl(np.moveaxis(x, 0, -1)[None], stride)
    return np.ascontiguousarray(np.moveaxis(out[0], -1, 0))


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p: float, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return x * dropout_mask(np.shape(x), p, rng)


def sample_dropout_masks(model: Model, sample_ids: Sequence[int], epoch: int) -> np.ndarray:
    """One mask row per sample, drawn from a stream keyed by (seed, epoch, id)."""
    return np.stack([
        dropout_mask((model.n_features,), model.dropout_p,
                     stream(model.rng_seed, "dropout", epoch, sid))
        for sid in sample_ids
    ])


def fc_sigmoid(x, w, b) -> float:
    x = tc.as_tensor(x).ravel()
    w = tc.as_tensor(w)
    if w.shape != (1, x.size):
        raise ShapeError(f"weight {w.shape} does not match {x.size} features")
    return float(expit(tc.matmul(w, x[:, None])[0, 0] + float(np.ravel(b)[0])))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(model: Model, batch, mode: str = "eval", masks: np.ndarray | None = None,
            return_cache: bool = False, trace: list | None = None):
    """Probabilities for a ``(B, C, Z, W, H)`` batch.

    Train mode needs explicit dropout ``masks`` of shape ``(B, F)``; see
    :func:`sample_dropout_masks`.  ``trace`` receives the ``C x Z x W x H``
    shape after every layer.
    """
    x = tc.as_tensor(batch)
    if x.ndim != 5 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"expected batch of shape (B, *{model.input_shape}), got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    bsz = x.shape[0]
    t = np.ascontiguousarray(np.moveaxis(x, 1, -1))
    caches = []
    for i, spec in enumerate(model.specs[:-1]):
        if spec.kind == "axial":
            t, cache = att.axial_layer_forward_cl(t, model.layers[i], keep=return_cache)
        else:
            t, cache = max_pool_cl(t, spec.stride)
        caches.append(cache if return_cache else None)
        if trace is not None:
            trace.append((t.shape[-1],) + t.shape[1:4])
    feats = np.ascontiguousarray(np.moveaxis(t, -1, 1)).reshape(bsz, -1)
    if mode == "train" and model.dropout_p > 0.0:
        if masks is None:
            raise ValueError("train mode needs dropout masks")
        if masks.shape != feats.shape:
            raise ShapeError(f"dropout masks {masks.shape} != features {feats.shape}")
        feats_d = feats * masks
    else:
        masks = None
        feats_d = feats
    # row-wise reduction, so a sample's logit does not depend on the batch size
    logits = np.sum(feats_d * model.params["fc.weight"][0], axis=1) + model.params["fc.bias"][0]
    probs = expit(logits)
    if trace is not None:
        trace.append((1,))
    if not return_cache:
        return probs
    return probs, (caches, t.shape, feats_d, masks, probs)


def backward_from_probs(model: Model, cache, dprobs: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(probabilities)."""
    caches, t_shape, feats_d, masks, probs = cache
    grads: dict[str, np.ndarray] = {}
    dlogits = dprobs * probs * (1.0 - probs)
    w = model.params["fc.weight"]
    grads["fc.weight"] = tc.matmul(dlogits[None, :], feats_d)
    grads["fc.bias"] = np.array([dlogits.sum()])
    dfeats = dlogits[:, None] * w
    if masks is not None:
        dfeats = dfeats * masks
    b, z, ww, h, c = t_shape
    dt = np.ascontiguousarray(np.moveaxis(dfeats.reshape(b, c, z, ww, h), 1, -1))
    names = dict(model._axial_names())
    for i in range(len(model.specs) - 2, -1, -1):
        spec = model.specs[i]
        if spec.kind == "axial":
            dt, g = att.axial_layer_backward_cl(dt, caches[i], model.layers[i])
            for k, v in g.items():
                grads[f"{names[i]}.{k}"] = v
        else:
            dt = max_pool_backward_cl(dt, caches[i])
    return {k: grads[k] for k in model.params}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"AXCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: offset 0: expected magic 'AXCK', got {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointFormatError(f"{path}: offset 4: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: offset 4: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(buf):
            raise CheckpointFormatError(
                f"{path}: offset {pos}: need {n} bytes, only {len(buf) - pos} left"
            )

    while pos < len(buf):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64))
        need(8 * count)
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * count
    return out


def model_from_tensors(tensors: dict[str, np.ndarray], seed: int = 0) -> Model:
    """Rebuild a default-layout model; D sizes are read from the embeddings."""
    d_sizes = tuple(int(tensors[f"axial{k}.w_q"].shape[0]) for k in range(1, 7))
    params = {k: v for k, v in tensors.items() if not k.startswith("data.")}
    return Model(default_specs(d_sizes), INPUT_SHAPE, seed, params)
