"""Desk-scale quantized networks used as the attack substrate.

Two architectures are recognised from the layer kinds:

* MLP - a chain of ``LINEAR`` / ``MLP_IN`` / ``MLP_OUT`` layers ending in an
  ``OUTPUT_HEAD``; activation after every layer but the last.
* Attention - input features are split into tokens of width ``Q.cols``; one
  single-head self-attention block (Q, K, V, O), mean pooling over tokens, a
  residual two-layer MLP and an output head.

Weights are stored quantized; every computation runs on dequantized values.
Gradients are taken with respect to the dequantized weights (straight-through).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flipset import FlipSet
from .qtensor import QuantError, QuantFormat, QuantizedTensor, flipped_dense

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1

# Non-finite losses are reported as this value so orderings stay total.
LOSS_SENTINEL = 1e9

_GELU_C = math.sqrt(2.0 / math.pi)


class LayerKind(enum.Enum):
    LINEAR = "linear"
    ATTENTION_Q = "attention_q"
    ATTENTION_K = "attention_k"
    ATTENTION_V = "attention_v"
    ATTENTION_O = "attention_o"
    MLP_IN = "mlp_in"
    MLP_OUT = "mlp_out"
    OUTPUT_HEAD = "output_head"


class Activation(enum.Enum):
    RELU = "relu"
    GELU = "gelu"


_ATTN_ORDER = (
    LayerKind.ATTENTION_Q,
    LayerKind.ATTENTION_K,
    LayerKind.ATTENTION_V,
    LayerKind.ATTENTION_O,
    LayerKind.MLP_IN,
    LayerKind.MLP_OUT,
    LayerKind.OUTPUT_HEAD,
)
_MLP_KINDS = {LayerKind.LINEAR, LayerKind.MLP_IN, LayerKind.MLP_OUT, LayerKind.OUTPUT_HEAD}


class ModelError(ValueError):
    """Shape mismatch, unknown layer or otherwise ill-formed model/dataset."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint / dataset file."""


@dataclass(frozen=True, eq=False)
class LayerSpec:
    name: str
    kind: LayerKind
    weights: QuantizedTensor
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.bias is not None:
            bias = np.array(self.bias, dtype=np.float64)
            if bias.shape != (self.weights.shape[0],):
                raise ModelError(f"layer {self.name!r}: bias length {bias.size} != rows {self.weights.shape[0]}")
            bias.setflags(write=False)
            object.__setattr__(self, "bias", bias)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ModelError(f"dataset shapes inconsistent: inputs {x.shape}, labels {y.shape}")
        if x.shape[0] == 0:
            raise ModelError("dataset is empty")
        if not np.all(np.isfinite(x)):
            raise ModelError("dataset inputs must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class ToyModel:
    layers: tuple[LayerSpec, ...]
    activation: Activation
    num_classes: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ModelError("model needs at least one layer")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ModelError("layer names must be unique")
        if self.num_classes < 1:
            raise ModelError("num_classes must be positive")
        if layers[-1].weights.shape[0] != self.num_classes:
            raise ModelError(f"last layer has {layers[-1].weights.shape[0]} rows, expected {self.num_classes}")
        kinds = tuple(l.kind for l in layers)
        if LayerKind.ATTENTION_Q in kinds:
            if kinds != _ATTN_ORDER:
                raise ModelError(f"attention model must have layers in order {[k.value for k in _ATTN_ORDER]}")
            q, k, v, o, mi, mo, head = (l.weights.shape for l in layers)
            d_in = q[1]
            if not (k == q and v[1] == d_in and o[1] == v[0] and mi[1] == o[0]
                    and mo == (o[0], mi[0]) and head[1] == o[0]):
                raise ModelError("attention layer shapes are inconsistent")
        else:
            if not all(k in _MLP_KINDS for k in kinds):
                raise ModelError("MLP models may only contain linear/mlp/output layers")
            for prev, nxt in zip(layers, layers[1:]):
                if nxt.weights.shape[1] != prev.weights.shape[0]:
                    raise ModelError(f"layer {nxt.name!r} expects {nxt.weights.shape[1]} inputs, "
                                     f"{prev.name!r} produces {prev.weights.shape[0]}")

    @property
    def is_attention(self) -> bool:
        return self.layers[0].kind is LayerKind.ATTENTION_Q

    @property
    def input_width(self) -> int | None:
        """Required feature count, or ``None`` when any multiple of the token width works."""
        return None if self.is_attention else self.layers[0].weights.shape[1]

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise ModelError(f"unknown layer {name!r}")

    def total_bits(self) -> int:
        return sum(l.weights.bits for l in self.layers)

    def codes_digest(self) -> bytes:
        """Concatenated raw codes of every layer; equal digests mean identical weights."""
        return b"".join(l.weights.codes.tobytes() for l in self.layers)

    def replace_layer(self, layer: LayerSpec) -> "ToyModel":
        return ToyModel(tuple(layer if l.name == layer.name else l for l in self.layers),
                        self.activation, self.num_classes)


# ---------------------------------------------------------------- numerics

def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def _act_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    u = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    out = x @ w.T
    return out if b is None else out + b


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_inputs(kinds: Sequence[LayerKind], weights: Sequence[np.ndarray], x: np.ndarray) -> None:
    if kinds[0] is LayerKind.ATTENTION_Q:
        d_in = weights[0].shape[1]
        if x.shape[1] % d_in:
            raise ModelError(f"feature count {x.shape[1]} is not a multiple of token width {d_in}")
    elif x.shape[1] != weights[0].shape[1]:
        raise ModelError(f"dataset has {x.shape[1]} features, model expects {weights[0].shape[1]}")


def _forward(kinds, act, weights, biases, x, keep_cache=False):
    if kinds[0] is LayerKind.ATTENTION_Q:
        return _attn_forward(act, weights, biases, x, keep_cache)
    return _mlp_forward(act, weights, biases, x, keep_cache)


def _mlp_forward(act, weights, biases, x, keep_cache):
    cache = []
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = _affine(h, w, b)
        if keep_cache:
            cache.append((h, z))
        h = z if i == last else _act(act, z)
    return h, cache


def _mlp_backward(act, weights, cache, dlogits):
    grads_w, grads_b = [None] * len(weights), [None] * len(weights)
    g = dlogits
    last = len(weights) - 1
    for i in range(last, -1, -1):
        h_in, z = cache[i]
        if i != last:
            g = g * _act_grad(act, z)
        grads_w[i] = g.T @ h_in
        grads_b[i] = g.sum(axis=0)
        g = g @ weights[i]
    return grads_w, grads_b


def _attn_forward(act, weights, biases, x, keep_cache):
    wq, wk, wv, wo, wi, wout, wh = weights
    bq, bk, bv, bo, bi, bout, bh = biases
    n = x.shape[0]
    d_in = wq.shape[1]
    xt = x.reshape(n, -1, d_in)
    q = _affine(xt, wq, bq)
    k = _affine(xt, wk, bk)
    v = _affine(xt, wv, bv)
    inv = 1.0 / math.sqrt(wq.shape[0])
    a = _softmax(np.einsum("ntd,nsd->nts", q, k) * inv)
    hv = a @ v
    o = _affine(hv, wo, bo)
    pooled = o.mean(axis=1)
    pre = _affine(pooled, wi, bi)
    u = _act(act, pre)
    z = pooled + _affine(u, wout, bout)
    logits = _affine(z, wh, bh)
    cache = (xt, q, k, v, a, hv, pooled, pre, u, z, inv) if keep_cache else None
    return logits, cache


def _attn_backward(act, weights, cache, dlogits):
    wq, wk, wv, wo, wi, wout, wh = weights
    xt, q, k, v, a, hv, pooled, pre, u, z, inv = cache
    t = xt.shape[1]
    g_wh = dlogits.T @ z
    dz = dlogits @ wh
    g_wout = dz.T @ u
    dpre = (dz @ wout) * _act_grad(act, pre)
    g_wi = dpre.T @ pooled
    dpooled = dz + dpre @ wi
    do = np.broadcast_to(dpooled[:, None, :] / t, (xt.shape[0], t, dpooled.shape[1]))
    g_wo = np.einsum("ntd,nte->de", do, hv)
    dhv = do @ wo
    da = np.einsum("ntd,nsd->nts", dhv, v)
    dv = np.einsum("nts,ntd->nsd", a, dhv)
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * inv
    dq = ds @ k
    dk = np.einsum("nts,ntd->nsd", ds, q)
    g_wq = np.einsum("ntd,nti->di", dq, xt)
    g_wk = np.einsum("ntd,nti->di", dk, xt)
    g_wv = np.einsum("ntd,nti->di", dv, xt)
    grads_w = [g_wq, g_wk, g_wv, g_wo, g_wi, g_wout, g_wh]
    grads_b = [dq.sum(axis=(0, 1)), dk.sum(axis=(0, 1)), dv.sum(axis=(0, 1)), do.sum(axis=(0, 1)),
               dpre.sum(axis=0), dz.sum(axis=0), dlogits.sum(axis=0)]
    return grads_w, grads_b


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        loss = float(np.mean(lse - logits[np.arange(labels.size), labels]))
    return loss if math.isfinite(loss) else LOSS_SENTINEL


def loss_and_grads(kinds, act, weights, biases, x, labels):
    """Mean cross-entropy and its gradients for float parameters.

    Lower-level entry point shared by :func:`gradients` and offline fixture
    training; returns ``(loss, weight_grads, bias_grads)``.
    """
    _check_inputs(kinds, weights, x)
    logits, cache = _forward(kinds, act, weights, biases, x, keep_cache=True)
    loss = _cross_entropy(logits, labels)
    p = _softmax(logits)
    p[np.arange(labels.size), labels] -= 1.0
    dlogits = p / labels.size
    backward = _attn_backward if kinds[0] is LayerKind.ATTENTION_Q else _mlp_backward
    gw, gb = backward(act, weights, cache, dlogits)
    return loss, gw, gb


# ---------------------------------------------------------------- public API

def _weights(m: ToyModel, overlay: FlipSet | None) -> list[np.ndarray]:
    if overlay is not None:
        target = m.layer(overlay.layer)
        if overlay.indices and max(overlay.indices) >= target.weights.size:
            raise ModelError(f"flip index {max(overlay.indices)} out of range for layer {overlay.layer!r}")
    out = []
    for l in m.layers:
        if overlay is not None and l.name == overlay.layer and overlay.indices:
            out.append(flipped_dense(l.weights, overlay.indices, overlay.pos))
        else:
            out.append(l.weights.dense())
    return out


def logits(m: ToyModel, d: Dataset, overlay: FlipSet | None = None) -> np.ndarray:
    w = _weights(m, overlay)
    kinds = [l.kind for l in m.layers]
    _check_inputs(kinds, w, d.inputs)
    with np.errstate(over="ignore", invalid="ignore"):
        out, _ = _forward(kinds, m.activation, w, [l.bias for l in m.layers], d.inputs)
    return out


def forward_loss(m: ToyModel, d: Dataset, overlay: FlipSet | None = None) -> float:
    """Mean cross-entropy over ``d`` with ``overlay`` flips applied virtually.

    Stored codes are never touched. A non-finite result is returned as
    ``LOSS_SENTINEL``.
    """
    if d.labels.max() >= m.num_classes or d.labels.min() < 0:
        raise ModelError("dataset labels out of range for model")
    return _cross_entropy(logits(m, d, overlay), d.labels)


def gradients(m: ToyModel, d: Dataset) -> dict[str, np.ndarray]:
    """d(mean cross-entropy)/d(dequantized weight) for every layer, keyed by name."""
    kinds = [l.kind for l in m.layers]
    with np.errstate(over="ignore", invalid="ignore"):
        _, gw, _ = loss_and_grads(kinds, m.activation, _weights(m, None),
                                  [l.bias for l in m.layers], d.inputs, d.labels)
    out = {}
    for l, g in zip(m.layers, gw):
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient in layer {l.name!r}")
        out[l.name] = g
    return out


def perplexity(m: ToyModel, d: Dataset, overlay: FlipSet | None = None) -> float:
    return exp_loss(forward_loss(m, d, overlay))


def exp_loss(loss: float) -> float:
    """Perplexity of a mean cross-entropy; ``inf`` when it overflows."""
    try:
        return math.exp(loss)
    except OverflowError:
        return math.inf


def accuracy(m: ToyModel, d: Dataset, overlay: FlipSet | None = None) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    pred = np.argmax(logits(m, d, overlay), axis=1)
    return float(np.mean(pred == d.labels))


def mask_weights(m: ToyModel, fs: FlipSet) -> ToyModel:
    """New model with every targeted weight set to its format's zero code."""
    layer = m.layer(fs.layer)
    t = layer.weights
    if fs.indices and max(fs.indices) >= t.size:
        raise ModelError(f"mask index {max(fs.indices)} out of range for layer {fs.layer!r}")
    codes = t.codes.copy()
    codes[list(fs.indices)] = t.format.zero_code
    return m.replace_layer(LayerSpec(layer.name, layer.kind, t.with_codes(codes), layer.bias))


def synth_dataset(seed: int, n_samples: int, n_features: int, n_classes: int) -> Dataset:
    """Gaussian inputs labelled by a hidden random linear rule plus small noise."""
    if min(n_samples, n_features, n_classes) <= 0:
        raise ModelError("dataset sizes must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, n_features))
    rule = rng.standard_normal((n_classes, n_features))
    noise = 0.1 * rng.standard_normal((n_samples, n_classes))
    return Dataset(x, np.argmax(x @ rule.T + noise, axis=1))


# ---------------------------------------------------------------- file I/O

def _fmt_json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def checkpoint_to_dict(m: ToyModel) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "activation": m.activation.value,
        "num_classes": m.num_classes,
        "layers": [
            {
                "name": l.name,
                "kind": l.kind.value,
                "rows": l.weights.shape[0],
                "cols": l.weights.shape[1],
                "format": l.weights.format.value,
                "scale": l.weights.scale,
                "codes": [int(c) for c in l.weights.codes],
                "bias": None if l.bias is None else [float(b) for b in l.bias],
            }
            for l in m.layers
        ],
    }


def save_checkpoint(m: ToyModel, path: str | Path) -> None:
    Path(path).write_text(_fmt_json(checkpoint_to_dict(m)), encoding="utf-8")


def _read_json(path: str | Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: not UTF-8 (byte offset {exc.start})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno} (char offset {exc.pos}): {exc.msg}"
        ) from exc


def _field(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise CheckpointError(f"missing field {where}{key}")
    val = obj[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
        raise CheckpointError(f"field {where}{key} has wrong type {type(val).__name__}")
    return val


def checkpoint_from_dict(data: dict) -> ToyModel:
    version = _field(data, "version", int, "")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        activation = Activation(_field(data, "activation", str, ""))
    except ValueError as exc:
        raise CheckpointError(f"field activation: {exc}") from exc
    num_classes = _field(data, "num_classes", int, "")
    layers = []
    for j, raw in enumerate(_field(data, "layers", list, "")):
        where = f"layers[{j}]."
        name = _field(raw, "name", str, where)
        try:
            kind = LayerKind(_field(raw, "kind", str, where))
            fmt = QuantFormat(_field(raw, "format", str, where))
        except ValueError as exc:
            raise CheckpointError(f"{where}: {exc}") from exc
        rows = _field(raw, "rows", int, where)
        cols = _field(raw, "cols", int, where)
        scale = _field(raw, "scale", float, where)
        codes = _field(raw, "codes", list, where)
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in codes):
            raise CheckpointError(f"field {where}codes must contain integers")
        bias = raw.get("bias") if isinstance(raw, dict) else None
        if bias is not None and (not isinstance(bias, list)
                                 or not all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in bias)):
            raise CheckpointError(f"field {where}bias must be a list of numbers or null")
        try:
            tensor = QuantizedTensor(fmt, (rows, cols), np.array(codes, dtype=np.int64), scale)
            layers.append(LayerSpec(name, kind, tensor, None if bias is None else np.array(bias, dtype=np.float64)))
        except (QuantError, ModelError) as exc:
            raise CheckpointError(f"{where}: {exc}") from exc
    try:
        return ToyModel(tuple(layers), activation, num_classes)
    except ModelError as exc:
        raise CheckpointError(str(exc)) from exc


def load_checkpoint(path: str | Path) -> ToyModel:
    data = _read_json(path)
    try:
        return checkpoint_from_dict(data)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def save_dataset(d: Dataset, path: str | Path) -> None:
    doc = {"version": DATASET_VERSION, "inputs": [[float(v) for v in row] for row in d.inputs],
           "labels": [int(v) for v in d.labels]}
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    data = _read_json(path)
    if isinstance(data, dict) and data.get("version", DATASET_VERSION) != DATASET_VERSION:
        raise CheckpointError(f"{path}: dataset version {data['version']!r} unsupported")
    inputs = _field(data, "inputs", list, "")
    labels = _field(data, "labels", list, "")
    try:
        return Dataset(np.array(inputs, dtype=np.float64), np.array(labels, dtype=np.int64))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
