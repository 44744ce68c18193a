"""Reference checkpoints and datasets shipped with the package.

The reference models are trained once, offline, by :func:`write_reference_fixtures`
(exposed as ``bitbreaker gen-fixtures``) and the resulting JSON files are
committed under ``bitbreaker/data``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .flipset import FlipSet
from .qtensor import QuantFormat, QuantizedTensor, quantize
from .toymodel import (
    Activation,
    Dataset,
    LayerKind,
    LayerSpec,
    ToyModel,
    accuracy,
    forward_loss,
    load_checkpoint,
    load_dataset,
    logits,
    loss_and_grads,
    save_checkpoint,
    save_dataset,
    synth_dataset,
)

REFERENCE_SEED = 42
REFERENCE_SHAPE = (64, 8, 4)  # samples, features, classes
TARGET_LOSS = 0.1
WEIGHT_DECAY = 0.5
SILENT_GAP = 0.5

MLP_LAYERS = (
    ("fc1", LayerKind.LINEAR, 16, 8),
    ("fc2", LayerKind.LINEAR, 16, 16),
    ("head", LayerKind.OUTPUT_HEAD, 4, 16),
)
# 8 input features are read as 4 tokens of width 2
ATTN_LAYERS = (
    ("attn.q", LayerKind.ATTENTION_Q, 8, 2),
    ("attn.k", LayerKind.ATTENTION_K, 8, 2),
    ("attn.v", LayerKind.ATTENTION_V, 8, 2),
    ("attn.o", LayerKind.ATTENTION_O, 8, 8),
    ("mlp.in", LayerKind.MLP_IN, 16, 8),
    ("mlp.out", LayerKind.MLP_OUT, 8, 16),
    ("head", LayerKind.OUTPUT_HEAD, 4, 8),
)

FIXTURE_FILES = {
    "dataset": "dataset_seed42.json",
    "mlp": "toy_mlp_int8.json",
    "mlp_nf4": "toy_mlp_nf4.json",
    "mlp_ternary": "toy_mlp_ternary.json",
    "attn": "toy_attn_int8.json",
    "planted": "toy_planted_int8.json",
    "planted_dataset": "dataset_planted.json",
}


def train_float(layout, activation: Activation, data: Dataset, seed: int, steps: int = 3000,
                lr: float = 0.01, target_loss: float = 0.0,
                weight_decay: float = 0.0) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Full-batch Adam on float weights; only used to produce reference checkpoints.

    Stops early once the float loss drops to ``target_loss`` so the shipped
    models are accurate without being saturated.
    """
    rng = np.random.default_rng(seed)
    kinds = [kind for _, kind, _, _ in layout]
    weights = [rng.standard_normal((r, c)) / np.sqrt(c) for _, _, r, c in layout]
    biases = [np.zeros(r) for _, _, r, _ in layout]
    params = weights + biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, steps + 1):
        loss, gw, gb = loss_and_grads(kinds, activation, weights, biases, data.inputs, data.labels)
        if loss <= target_loss:
            break
        for i, g in enumerate(gw + gb):
            m1[i] = b1 * m1[i] + (1 - b1) * g
            m2[i] = b2 * m2[i] + (1 - b2) * g * g
            mhat = m1[i] / (1 - b1 ** step)
            vhat = m2[i] / (1 - b2 ** step)
            params[i] -= lr * mhat / (np.sqrt(vhat) + eps)
            if i < len(layout):
                params[i] -= lr * weight_decay * params[i]
    return params[: len(layout)], params[len(layout):]


def quantize_model(layout, activation: Activation, weights, biases, fmt: QuantFormat,
                   num_classes: int) -> ToyModel:
    layers = tuple(
        LayerSpec(name, kind, quantize(w, fmt), b)
        for (name, kind, _, _), w, b in zip(layout, weights, biases)
    )
    return ToyModel(layers, activation, num_classes)


def reference_dataset() -> Dataset:
    return synth_dataset(REFERENCE_SEED, *REFERENCE_SHAPE)


def build_reference_models(data: Dataset | None = None) -> dict[str, ToyModel]:
    data = data if data is not None else reference_dataset()
    k = REFERENCE_SHAPE[2]
    w, b = train_float(MLP_LAYERS, Activation.GELU, data, seed=1, target_loss=TARGET_LOSS,
                       weight_decay=WEIGHT_DECAY)
    models = {
        "mlp": quantize_model(MLP_LAYERS, Activation.GELU, w, b, QuantFormat.INT8, k),
        "mlp_nf4": quantize_model(MLP_LAYERS, Activation.GELU, w, b, QuantFormat.NF4, k),
        "mlp_ternary": quantize_model(MLP_LAYERS, Activation.GELU, w, b, QuantFormat.TERNARY, k),
    }
    w, b = train_float(ATTN_LAYERS, Activation.GELU, data, seed=2, target_loss=TARGET_LOSS,
                       weight_decay=WEIGHT_DECAY)
    models["attn"] = quantize_model(ATTN_LAYERS, Activation.GELU, w, b, QuantFormat.INT8, k)
    return models


def write_reference_fixtures(out_dir: str | Path) -> dict[str, float]:
    """Train, quantize and write every reference fixture; returns clean accuracies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = reference_dataset()
    save_dataset(data, out / FIXTURE_FILES["dataset"])
    accs = {}
    for name, model in build_reference_models(data).items():
        save_checkpoint(model, out / FIXTURE_FILES[name])
        accs[name] = accuracy(model, data)
    inst = planted_preset("oracle", PLANTED_SEED)
    save_checkpoint(inst.model, out / FIXTURE_FILES["planted"])
    save_dataset(inst.dataset, out / FIXTURE_FILES["planted_dataset"])
    accs["planted"] = accuracy(inst.model, inst.dataset)
    return accs


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("bitbreaker") / "data" / FIXTURE_FILES[name]))


def load_reference(name: str = "mlp") -> ToyModel:
    return load_checkpoint(fixture_path(name))


def load_reference_dataset(name: str = "dataset") -> Dataset:
    return load_dataset(fixture_path(name))


# ---------------------------------------------------------------- planted instances

@dataclass(frozen=True)
class PlantedInstance:
    """A toy MLP with known critical head weights.

    ``planted`` holds the critical head indices; flipping all of them raises
    the logit of ``target_class`` for every sample. ``planted_units`` are the
    always-on hidden units that carry them.
    """

    model: ToyModel
    dataset: Dataset
    planted: FlipSet
    target_class: int
    planted_units: tuple[int, ...]


def planted_mlp(seed: int, n_planted: int = 1, hidden: int = 32, planted_code: int = -1,
                head_scale: float = 0.03, unit_drive: float = 3.0, n_dormant: int = 0, silent_target: bool = False,
                n_samples: int = 64, n_features: int = 8, n_classes: int = 4) -> PlantedInstance:
    """Random two-layer INT8 MLP with ``n_planted`` critical head weights.

    Each planted weight sits on its own always-on hidden unit (zero input
    weights, float bias ``unit_drive``) in the row of ``target_class``; its
    code is ``planted_code`` and the head bias cancels its clean contribution,
    so the clean model is unaffected while an MSB flip adds roughly
    ``128 * head_scale * gelu(unit_drive)`` to the target logit. Labels are
    the clean model's own predictions.
    """
    rng = np.random.default_rng([seed, 7])
    x = synth_dataset(seed, n_samples, n_features, n_classes).inputs
    picked = rng.choice(hidden, size=n_planted + n_dormant, replace=False)
    units = tuple(int(u) for u in picked[:n_planted])
    dormant = [int(u) for u in picked[n_planted:]]
    normal = np.setdiff1d(np.arange(hidden), picked)

    w1 = rng.standard_normal((hidden, n_features)) / np.sqrt(n_features)
    w1[list(units)] = 0.0
    b1 = np.zeros(hidden)
    b1[list(units)] = unit_drive
    w1[dormant] = 0.0
    b1[dormant] = -unit_drive * 4
    fc1 = quantize(w1, QuantFormat.INT8)

    target = int(rng.integers(n_classes))
    codes = np.zeros((n_classes, hidden), dtype=np.int64)
    codes[:, normal] = rng.integers(-63, 64, size=(n_classes, normal.size))
    codes[:, dormant] = rng.choice([-127, 127], size=(n_classes, len(dormant)))
    if silent_target:
        codes[target, normal] = 0
    codes[target, list(units)] = planted_code
    head = QuantizedTensor(QuantFormat.INT8, (n_classes, hidden), codes.astype(np.int8).view(np.uint8).reshape(-1),
                           head_scale)
    drive = float(0.5 * unit_drive * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (unit_drive + 0.044715 * unit_drive ** 3))))
    b2 = np.zeros(n_classes)
    b2[target] = -planted_code * head_scale * drive * n_planted

    def build(b2):
        return ToyModel(
            (LayerSpec("fc1", LayerKind.LINEAR, fc1, b1), LayerSpec("head", LayerKind.OUTPUT_HEAD, head, b2)),
            Activation.GELU,
            n_classes,
        )

    unlabeled = Dataset(x, np.zeros(n_samples, dtype=np.int64))
    model = build(b2)
    if silent_target:
        # runner-up on every sample, never the argmax
        z = logits(model, unlabeled)
        others = np.delete(z, target, axis=1).max(axis=1)
        b2[target] += float(np.min(others - z[:, target])) - SILENT_GAP
        model = build(b2)
    labels = np.argmax(logits(model, unlabeled), axis=1)
    planted = FlipSet("head", tuple(sorted(target * hidden + u for u in units)), 7)
    return PlantedInstance(model, Dataset(x, labels), planted, target, tuple(sorted(units)))


# Scenario presets used by the acceptance suite and `gen-fixtures`.
PLANTED_PRESETS = {
    # sparse critical set that dominates every decoy; small oracle instances
    "oracle": dict(hidden=32),
    # wide head, moderately large planted codes buried among ordinary weights
    "reduction": dict(n_planted=3, hidden=128, planted_code=-62),
    # planted codes are the largest magnitudes in the head
    "parity": dict(n_planted=2, hidden=32, planted_code=-127),
    # tiny planted codes on a never-predicted runner-up class; masking is harmless
    "recovery": dict(n_planted=2, hidden=32, n_dormant=2, silent_target=True, head_scale=0.01, unit_drive=9.0),
}
PLANTED_SEED = 0


def planted_preset(name: str, seed: int, **overrides) -> PlantedInstance:
    return planted_mlp(seed, **{**PLANTED_PRESETS[name], **overrides})


def planted_threshold(inst: PlantedInstance) -> float:
    """Midway between the loss with all planted flips and with one fewer.

    Every planted flip is then needed to reach the threshold.
    """
    idx = inst.planted.indices
    hi = forward_loss(inst.model, inst.dataset, inst.planted)
    if len(idx) > 1:
        lo = forward_loss(inst.model, inst.dataset, inst.planted.with_indices(idx[:-1]))
    else:
        lo = forward_loss(inst.model, inst.dataset)
    return 0.5 * (lo + hi)
