"""Dense classifier core: parameters, backprop, freezing, round schedules.

Training math is float64. The default network is 32 -> 64 -> 32 -> 5
(relu, relu, softmax); hidden layers are relu and the output layer is
always softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .codec import SCHEMA_VERSION, decode_f32, encode_f32, quantize_f32
from .errors import ConfigError, NumericError, ShapeError

RELU = "relu"
SOFTMAX = "softmax"

DEFAULT_FEATURE_DIM = 32
DEFAULT_HIDDEN = (64, 32)
DEFAULT_CLASSES = 5


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str

    def __eq__(self, other):
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            self.activation == other.activation
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass
class ModelParams:
    """Per-layer weights/biases plus activations and a round version."""

    layers: list[DenseLayer]
    version: int = 0

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.version == other.version and self.layers == other.layers

    @property
    def feature_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[0]

    @property
    def num_parameters(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(l.weights.shape) for l in self.layers]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.version,
        )

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("model has no layers")
        if self.version < 0:
            raise ConfigError("model version must be >= 0")
        for i, layer in enumerate(self.layers):
            w, b = layer.weights, layer.bias
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weights {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.layers[i - 1].weights.shape[0]:
                raise ShapeError(
                    f"layer {i} input dim {w.shape[1]} != layer {i - 1} "
                    f"output dim {self.layers[i - 1].weights.shape[0]}"
                )
            expected = SOFTMAX if i == len(self.layers) - 1 else RELU
            if layer.activation != expected:
                raise ConfigError(f"layer {i} activation must be {expected!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {i} has non-finite parameters")


@dataclass
class ParamDelta:
    """Per-layer (dW, db) arrays shape-identical to some ModelParams."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    round: int = 0

    def __eq__(self, other):
        if not isinstance(other, ParamDelta):
            return NotImplemented
        if self.round != other.round or len(self.layers) != len(other.layers):
            return False
        return all(
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            for a, b in zip(self.layers, other.layers)
        )

    def validate_against(self, params: ModelParams) -> None:
        if len(self.layers) != len(params.layers):
            raise ShapeError("delta layer count mismatch")
        for i, ((dw, db), layer) in enumerate(zip(self.layers, params.layers)):
            if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
                raise ShapeError(f"delta layer {i} shape mismatch")
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                raise NumericError(f"delta layer {i} has non-finite entries")


@dataclass
class LabeledBatch:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) integer class indices

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError("features must be 2-D")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("labels must be 1-D and match the batch size")
        if self.features.shape[0] < 1:
            raise ConfigError("batch must contain at least one sample")
        if self.labels.min(initial=0) < 0:
            raise ConfigError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Phase:
    epochs: int
    learning_rate: float
    batch_size: int
    freeze_mask: tuple[bool, ...] | None = None  # True = frozen; None = nothing frozen


@dataclass
class RoundSchedule:
    phases: list[Phase] = field(default_factory=list)

    def validate(self, n_layers: int) -> None:
        for p in self.phases:
            if p.epochs < 0:
                raise ConfigError("epochs must be >= 0")
            if p.batch_size < 1:
                raise ConfigError("batch size must be >= 1")
            if p.freeze_mask is not None and len(p.freeze_mask) != n_layers:
                raise ConfigError("freeze mask length must equal layer count")


def standard_schedule(round_index: int, n_layers: int) -> RoundSchedule:
    """Per-round training plan: the first round trains the new output layer
    at 1e-3 for 10 epochs with everything else frozen, then fine-tunes the
    whole network at 1e-4 for 30 epochs; later rounds fine-tune for 10.
    """
    if round_index < 1:
        raise ConfigError("round index starts at 1")
    all_but_last = tuple(i != n_layers - 1 for i in range(n_layers))
    if round_index == 1:
        return RoundSchedule(
            [
                Phase(10, 1e-3, 32, all_but_last),
                Phase(30, 1e-4, 32, None),
            ]
        )
    return RoundSchedule([Phase(10, 1e-4, 32, None)])


def _glorot(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-lim, lim, size=(out_dim, in_dim))


def init_model(
    seed,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    classes: int = DEFAULT_CLASSES,
) -> ModelParams:
    """Seeded uniform +-sqrt(6/(in+out)) weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = (feature_dim, *hidden, classes)
    layers = []
    for i in range(len(dims) - 1):
        act = SOFTMAX if i == len(dims) - 2 else RELU
        layers.append(
            DenseLayer(_glorot(rng, dims[i + 1], dims[i]), np.zeros(dims[i + 1]), act)
        )
    return ModelParams(layers, version=0)


def _weights_biases(params: ModelParams):
    return [l.weights for l in params.layers], [l.bias for l in params.layers]


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input row."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != params.feature_dim:
        raise ShapeError(
            f"input dim {x.shape[1]} != model feature dim {params.feature_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input features")
    ws, bs = _weights_biases(params)
    return K.forward_probs(ws, bs, x)


def loss_and_grad(params: ModelParams, batch: LabeledBatch):
    """Mean cross-entropy and its gradient as per-layer (dW, db) pairs."""
    if batch.features.shape[1] != params.feature_dim:
        raise ShapeError("batch feature dim does not match model")
    if batch.labels.max() >= params.num_classes:
        raise ConfigError("label out of range for model head")
    ws, bs = _weights_biases(params)
    loss, gws, gbs = K.loss_and_grad(ws, bs, batch.features, batch.labels)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, list(zip(gws, gbs))


def evaluate(params: ModelParams, batch: LabeledBatch) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on a labeled batch."""
    probs = forward(params, batch.features)
    idx = np.arange(batch.n)
    loss = float(-np.mean(np.log(np.maximum(probs[idx, batch.labels], 1e-300))))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == batch.labels))
    return loss, accuracy


def sgd_step(
    params: ModelParams,
    grad,
    learning_rate: float,
    freeze_mask: tuple[bool, ...] | None = None,
) -> ModelParams:
    """One plain SGD step; frozen layers are returned untouched."""
    if freeze_mask is not None and len(freeze_mask) != len(params.layers):
        raise ShapeError("freeze mask length must equal layer count")
    layers = []
    for i, layer in enumerate(params.layers):
        gw, gb = grad[i]
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"gradient layer {i} shape mismatch")
        if freeze_mask is not None and freeze_mask[i]:
            layers.append(layer)
        else:
            layers.append(
                DenseLayer(
                    layer.weights - learning_rate * gw,
                    layer.bias - learning_rate * gb,
                    layer.activation,
                )
            )
    return ModelParams(layers, params.version)


def zero_delta(params: ModelParams, round_index: int = 0) -> ParamDelta:
    return ParamDelta(
        [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers],
        round_index,
    )


def delta_between(new: ModelParams, old: ModelParams, round_index: int) -> ParamDelta:
    return ParamDelta(
        [
            (n.weights - o.weights, n.bias - o.bias)
            for n, o in zip(new.layers, old.layers)
        ],
        round_index,
    )


def add_delta(params: ModelParams, delta: ParamDelta, version: int | None = None) -> ModelParams:
    """params + delta; layers with an all-zero delta keep their exact arrays."""
    delta.validate_against(params)
    layers = []
    for layer, (dw, db) in zip(params.layers, delta.layers):
        if not dw.any() and not db.any():
            layers.append(layer)
        else:
            layers.append(
                DenseLayer(layer.weights + dw, layer.bias + db, layer.activation)
            )
    return ModelParams(layers, params.version if version is None else version)


def _stack_batches(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, LabeledBatch):
        data = [data]
    batches = list(data)
    if not batches:
        raise ConfigError("no training data")
    feats = np.concatenate([b.features for b in batches], axis=0)
    labels = np.concatenate([b.labels for b in batches], axis=0)
    return feats, labels


def _train_phases(ws, bs, feats, labels, phases, rng, dp=None):
    """In-place phase/epoch/step loop over preallocated weight lists."""
    n = feats.shape[0]
    for phase in phases:
        mask = phase.freeze_mask
        lr = phase.learning_rate
        batch = phase.batch_size
        if phase.epochs > 0 and n < batch:
            raise ConfigError(
                f"batch size {batch} exceeds available samples {n}"
            )
        for _ in range(phase.epochs):
            perm = rng.permutation(n)
            for start in range(0, n - batch + 1, batch):
                idx = perm[start : start + batch]
                bx = feats[idx]
                by = labels[idx]
                if dp is None:
                    _, gws, gbs = K.loss_and_grad(ws, bs, bx, by)
                else:
                    from .dp import noisy_clipped_gradient

                    gws, gbs = noisy_clipped_gradient(ws, bs, bx, by, dp, rng)
                for l in range(len(ws)):
                    if mask is not None and mask[l]:
                        continue
                    ws[l] -= lr * gws[l]
                    bs[l] -= lr * gbs[l]


def run_round_schedule(
    params: ModelParams,
    data,
    schedule: RoundSchedule,
    round_index: int,
    seed: int,
    dp=None,
) -> tuple[ModelParams, ParamDelta]:
    """Run one round's phases and return (updated params, delta).

    Epoch order is shuffled by a generator seeded from (seed, round_index),
    so repeated runs with the same inputs are identical. Trailing samples
    that do not fill a batch are skipped for that epoch (the permutation
    changes which ones every epoch). The returned params are exactly
    ``params + delta`` and frozen layers keep their input arrays.
    """
    if round_index < 1:
        raise ConfigError("round index starts at 1")
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    params.validate()
    schedule.validate(len(params.layers))
    feats, labels = _stack_batches(data)
    if labels.max(initial=0) >= params.num_classes:
        raise ConfigError("label out of range for model head")
    if dp is not None:
        dp.validate()
        for phase in schedule.phases:
            if phase.epochs > 0 and phase.batch_size % dp.num_microbatches != 0:
                raise ConfigError(
                    "batch size must be a multiple of num_microbatches"
                )

    rng = np.random.default_rng(np.random.SeedSequence((seed, round_index)))
    ws = [l.weights.copy() for l in params.layers]
    bs = [l.bias.copy() for l in params.layers]
    _train_phases(ws, bs, feats, labels, schedule.phases, rng, dp=dp)

    delta = ParamDelta(
        [
            (w - l.weights, b - l.bias)
            for w, b, l in zip(ws, bs, params.layers)
        ],
        round_index,
    )
    delta.validate_against(params)
    updated = add_delta(params, delta, version=round_index)
    return updated, delta


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    target_classes: int = DEFAULT_CLASSES


def initial_source_model(source_data: LabeledBatch, config: PretrainConfig) -> ModelParams:
    """The seeded random model pretraining starts from."""
    ss = np.random.SeedSequence(config.seed)
    init_ss, _, _ = ss.spawn(3)
    classes = int(source_data.labels.max()) + 1
    return init_model(
        np.random.default_rng(init_ss),
        feature_dim=source_data.features.shape[1],
        hidden=config.hidden,
        classes=classes,
    )


def pretrain_transfer_model(source_data: LabeledBatch, config: PretrainConfig) -> ModelParams:
    """Train on the source task, then swap in a fresh head for the target.

    The returned model keeps the pretrained body; only the final layer is
    re-initialized, sized for ``config.target_classes``.
    """
    if config.target_classes < 2:
        raise ConfigError("target task needs at least two classes")
    ss = np.random.SeedSequence(config.seed)
    _, train_ss, head_ss = ss.spawn(3)

    model = initial_source_model(source_data, config)
    ws = [l.weights.copy() for l in model.layers]
    bs = [l.bias.copy() for l in model.layers]
    phases = [Phase(config.epochs, config.learning_rate, config.batch_size, None)]
    _train_phases(
        ws, bs, source_data.features, source_data.labels, phases,
        np.random.default_rng(train_ss),
    )

    head_rng = np.random.default_rng(head_ss)
    head_in = ws[-1].shape[1]
    layers = [
        DenseLayer(w, b, RELU) for w, b in zip(ws[:-1], bs[:-1])
    ]
    layers.append(
        DenseLayer(
            _glorot(head_rng, config.target_classes, head_in),
            np.zeros(config.target_classes),
            SOFTMAX,
        )
    )
    out = ModelParams(layers, version=0)
    out.validate()
    return out


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the checkpoint JSON: shapes, activations, 32-bit arrays, round."""
    params.validate()
    obj = {
        "schema_version": SCHEMA_VERSION,
        "shapes": [list(s) for s in params.shapes()],
        "activations": [l.activation for l in params.layers],
        "layers": [
            {"weights": encode_f32(l.weights), "bias": encode_f32(l.bias)}
            for l in params.layers
        ],
        "round": params.version,
    }
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def load_checkpoint(path) -> ModelParams:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_obj(obj)


def model_to_obj(params: ModelParams) -> dict:
    return {
        "shapes": [list(s) for s in params.shapes()],
        "activations": [l.activation for l in params.layers],
        "layers": [
            {"weights": encode_f32(l.weights), "bias": encode_f32(l.bias)}
            for l in params.layers
        ],
        "version": params.version,
    }


def model_from_obj(obj: dict) -> ModelParams:
    try:
        shapes = obj["shapes"]
        acts = obj["activations"]
        raw = obj["layers"]
        version = int(obj.get("version", obj.get("round", 0)))
        if "schema_version" in obj and obj["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {obj['schema_version']}")
        if not (len(shapes) == len(acts) == len(raw)):
            raise ConfigError("inconsistent layer counts")
        layers = []
        for shape, act, entry in zip(shapes, acts, raw):
            out_dim, in_dim = (int(shape[0]), int(shape[1]))
            layers.append(
                DenseLayer(
                    decode_f32(entry["weights"], (out_dim, in_dim)),
                    decode_f32(entry["bias"], (out_dim,)),
                    str(act),
                )
            )
        params = ModelParams(layers, version)
        params.validate()
        return params
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"malformed model object: {exc}") from exc


def delta_to_obj(delta: ParamDelta) -> dict:
    return {
        "shapes": [list(dw.shape) for dw, _ in delta.layers],
        "layers": [
            {"dweights": encode_f32(dw), "dbias": encode_f32(db)}
            for dw, db in delta.layers
        ],
        "round": delta.round,
    }


def delta_from_obj(obj: dict) -> ParamDelta:
    try:
        shapes = obj["shapes"]
        raw = obj["layers"]
        if len(shapes) != len(raw):
            raise ConfigError("inconsistent delta layer counts")
        layers = []
        for shape, entry in zip(shapes, raw):
            out_dim, in_dim = (int(shape[0]), int(shape[1]))
            layers.append(
                (
                    decode_f32(entry["dweights"], (out_dim, in_dim)),
                    decode_f32(entry["dbias"], (out_dim,)),
                )
            )
        return ParamDelta(layers, int(obj["round"]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"malformed delta object: {exc}") from exc


def schedule_to_obj(schedule: RoundSchedule) -> dict:
    return {
        "phases": [
            {
                "epochs": p.epochs,
                "learning_rate": p.learning_rate,
                "batch_size": p.batch_size,
                "freeze_mask": list(p.freeze_mask) if p.freeze_mask is not None else None,
            }
            for p in schedule.phases
        ]
    }


def schedule_from_obj(obj: dict) -> RoundSchedule:
    try:
        phases = []
        for p in obj["phases"]:
            mask = p["freeze_mask"]
            phases.append(
                Phase(
                    epochs=int(p["epochs"]),
                    learning_rate=float(p["learning_rate"]),
                    batch_size=int(p["batch_size"]),
                    freeze_mask=tuple(bool(b) for b in mask) if mask is not None else None,
                )
            )
        return RoundSchedule(phases)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed schedule object: {exc}") from exc


def quantize_model(params: ModelParams) -> ModelParams:
    """Model as it survives one trip over the 32-bit wire."""
    return ModelParams(
        [
            DenseLayer(quantize_f32(l.weights), quantize_f32(l.bias), l.activation)
            for l in params.layers
        ],
        params.version,
    )


def quantize_delta(delta: ParamDelta) -> ParamDelta:
    return ParamDelta(
        [(quantize_f32(dw), quantize_f32(db)) for dw, db in delta.layers],
        delta.round,
    )
