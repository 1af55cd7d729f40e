"""Spectral width reduction of an MLP with self-distillation recovery.

The loop: train the network to a target accuracy, collect a calibration
batch of hidden activations per layer, fit the MP noise model to the
activation covariance spectrum (quantile-initialized variance), keep the
eigenvectors above the bulk edge, fold that projection densely into the
adjacent weight matrices, then fine-tune the reduced model (student) against
the logits of the pre-reduction checkpoint (teacher) plus the task loss.
Repeat per layer until the parameter-reduction target is met.

The projection is dense width reduction, never sparsity: layer i's weights
become P^T W, P^T b and layer i+1's weight becomes W_next P, where P stacks
the kept eigenvectors.  The quantile is the aggressiveness knob: a higher
quantile assumes more noise variance, raises the bulk edge, keeps fewer
directions, and compresses harder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import MixtureDataset
from .errors import (
    AccuracyGateError,
    ConfigError,
    ContractError,
    NumericalError,
)
from .linalg import Window, window_spectrum
from .optim import clip_global_norm, make_optimizer
from .rmt import MPModel, count_outliers, fit_mp_sigma
from .rng import child_seed, make_rng

__all__ = [
    "MLPLayer",
    "MLPModel",
    "MLPTrainConfig",
    "DistillConfig",
    "PipelineConfig",
    "CompressionStageReport",
    "init_mlp",
    "mlp_forward",
    "mlp_loss_and_grads",
    "mlp_train",
    "accuracy",
    "collect_activations",
    "reduce_layer",
    "self_distill",
    "compress_pipeline",
    "quantile_sweep",
    "save_mlp_json",
    "load_mlp_json",
]

ACTIVATIONS = ("relu", "identity")
DEFAULT_K_MIN = 4
DEFAULT_CALIBRATION_SIZE = 512


@dataclass
class MLPLayer:
    """One dense layer: weight (out x in), bias (out,), activation."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}; expected {ACTIVATIONS}"
            )
        if (
            self.weight.ndim != 2
            or self.bias.ndim != 1
            or self.weight.shape[0] != self.bias.shape[0]
        ):
            raise ContractError(
                f"inconsistent layer shapes {self.weight.shape}, {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ContractError("layer parameters contain non-finite values")


@dataclass
class MLPModel:
    """Dense feed-forward network; the final layer is identity (logits)."""

    layers: list[MLPLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ContractError(
                    f"layer {i} input dim {self.layers[i].weight.shape[1]} does not "
                    f"chain with layer {i - 1} output {self.layers[i - 1].weight.shape[0]}"
                )
        if self.layers[-1].activation != "identity":
            raise ConfigError("final layer must be identity (logits)")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def widths(self) -> list[int]:
        return [self.input_dim] + [l.weight.shape[0] for l in self.layers]

    def param_count(self) -> int:
        return int(sum(l.weight.size + l.bias.size for l in self.layers))

    def leaves(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for l in self.layers:
            out.append(l.weight)
            out.append(l.bias)
        return out

    def copy(self) -> "MLPModel":
        return MLPModel(
            layers=[
                MLPLayer(l.weight.copy(), l.bias.copy(), l.activation)
                for l in self.layers
            ]
        )


@dataclass(frozen=True)
class MLPTrainConfig:
    """Task-loss training settings; stops early at target_accuracy (val)."""

    learning_rate: float = 3e-3
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float = 5.0
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    """Self-distillation settings: loss = alpha*CE + (1-alpha)*tau^2*KL."""

    alpha: float = 0.5
    temperature: float = 2.0
    learning_rate: float = 3e-3
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float = 5.0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0,1], got {self.alpha}")
        if not (self.temperature > 0.0):
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    """Staged compression settings."""

    quantile: float = 0.5
    k_min: int = DEFAULT_K_MIN
    target_reduction: float = 0.4
    calibration_size: int = DEFAULT_CALIBRATION_SIZE
    accuracy_gate: float = 0.9
    passes: int = 1
    seed: int = 0
    layer_order: tuple[int, ...] | None = None  # None: hidden layers first to last
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if not (0.0 < self.quantile < 1.0):
            raise ConfigError("quantile must be in (0,1)")
        if self.k_min < 1:
            raise ConfigError("k_min must be >= 1")
        if not (0.0 <= self.target_reduction <= 1.0):
            raise ConfigError("target_reduction must be in [0,1]")
        if self.passes < 1:
            raise ConfigError("passes must be >= 1")


@dataclass
class CompressionStageReport:
    """Record of one reduce-then-distill stage."""

    layer_index: int
    eigenvalues: np.ndarray
    fitted: MPModel
    kept_k: int
    width_before: int
    width_after: int
    params_before: int
    params_after: int
    acc_before: float | None = None
    acc_after_projection: float | None = None
    acc_after_distill: float | None = None


def init_mlp(
    dims: list[int], seed: int = 0, hidden_activation: str = "relu"
) -> MLPModel:
    """He-style uniform init for a network with the given layer widths."""
    if len(dims) < 2:
        raise ConfigError("need at least input and output dims")
    rng = make_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        bound = math.sqrt(6.0 / fan_in)
        weight = (2.0 * rng.random((dims[i + 1], fan_in)) - 1.0) * bound
        bias = np.zeros(dims[i + 1])
        activation = "identity" if i == len(dims) - 2 else hidden_activation
        layers.append(MLPLayer(weight, bias, activation))
    return MLPModel(layers)


def mlp_forward(
    model: MLPModel, inputs: np.ndarray, return_hidden: bool = False
):
    """Logits for a batch; optionally also every post-activation output."""
    x = np.asarray(inputs, dtype=float)
    hidden = []
    for layer in model.layers:
        x = x @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            x = np.maximum(x, 0.0)
        hidden.append(x)
    if return_hidden:
        return x, hidden
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mlp_loss_and_grads(
    model: MLPModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    teacher_logits: np.ndarray | None = None,
    alpha: float = 1.0,
    temperature: float = 1.0,
) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy (optionally blended with distillation KL) and gradients.

    With a teacher: loss = alpha * CE + (1-alpha) * tau^2 *
    KL(softmax(teacher/tau) || softmax(student/tau)).  alpha=1 reduces to
    plain cross-entropy bit-for-bit (the KL term contributes exactly zero).
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(labels, dtype=int)
    n = x.shape[0]
    acts = [x]
    pre_relu = []
    for layer in model.layers:
        z = acts[-1] @ layer.weight.T + layer.bias
        pre_relu.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    logits = acts[-1]
    probs = _softmax(logits)
    p_correct = probs[np.arange(n), y]
    ce = float(-np.mean(np.log(np.maximum(p_correct, 1e-300))))
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    dlogits = alpha * (probs - onehot) / n
    loss = alpha * ce
    if teacher_logits is not None and alpha < 1.0:
        tau = temperature
        q_teacher = _softmax(np.asarray(teacher_logits) / tau)
        q_student = _softmax(logits / tau)
        kl = float(
            np.mean(
                np.sum(
                    q_teacher
                    * (
                        np.log(np.maximum(q_teacher, 1e-300))
                        - np.log(np.maximum(q_student, 1e-300))
                    ),
                    axis=1,
                )
            )
        )
        loss = loss + (1.0 - alpha) * tau * tau * kl
        dlogits = dlogits + (1.0 - alpha) * tau * (q_student - q_teacher) / n
    if not np.isfinite(loss):
        raise NumericalError("non-finite training loss (diverged?)")
    grads: list[np.ndarray] = []
    delta = dlogits
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            delta = delta * (pre_relu[i] > 0.0)
        grads.append(delta.sum(axis=0))  # bias
        grads.append(delta.T @ acts[i])  # weight
        if i > 0:
            delta = delta @ layer.weight
    grads.reverse()  # now [w0, b0, w1, b1, ...]
    return loss, grads


def accuracy(model: MLPModel, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions."""
    logits = mlp_forward(model, inputs)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def _train_epochs(
    model: MLPModel,
    dataset: MixtureDataset,
    learning_rate: float,
    epochs: int,
    batch_size: int,
    seed: int,
    optimizer_kind: str,
    grad_clip: float,
    teacher: MLPModel | None = None,
    alpha: float = 1.0,
    temperature: float = 1.0,
    target_accuracy: float | None = None,
    select_best_val: bool = False,
) -> tuple[MLPModel, list[dict]]:
    """Shared mini-batch loop for task training and self-distillation.

    Both paths use the same seeded shuffling and update arithmetic so that
    alpha=1 distillation is step-for-step identical to plain fine-tuning.
    """
    x_train, y_train = dataset.subset("train")
    x_val, y_val = dataset.subset("val")
    teacher_train = mlp_forward(teacher, x_train) if teacher is not None else None
    optimizer = make_optimizer(optimizer_kind, learning_rate)
    rng = make_rng(seed)
    history: list[dict] = []
    best_val = -1.0
    best_model = model.copy() if select_best_val else model
    for epoch in range(epochs):
        perm = rng.permutation(x_train.shape[0])
        losses = []
        for start in range(0, x_train.shape[0], batch_size):
            idx = perm[start : start + batch_size]
            t_logits = teacher_train[idx] if teacher_train is not None else None
            loss, grads = mlp_loss_and_grads(
                model,
                x_train[idx],
                y_train[idx],
                teacher_logits=t_logits,
                alpha=alpha,
                temperature=temperature,
            )
            clip_global_norm(grads, grad_clip)
            optimizer.step(model.leaves(), grads)
            losses.append(loss)
        val_acc = accuracy(model, x_val, y_val)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_accuracy": float(val_acc),
            }
        )
        if select_best_val and val_acc > best_val:
            best_val = val_acc
            best_model = model.copy()
        if target_accuracy is not None and val_acc >= target_accuracy:
            break
    return (best_model if select_best_val else model), history


def mlp_train(
    model: MLPModel, dataset: MixtureDataset, config: MLPTrainConfig = MLPTrainConfig()
) -> tuple[MLPModel, list[dict]]:
    """Train on the task loss; stops at target val accuracy or max epochs.

    A zero-epoch config returns the model unchanged.
    """
    if config.epochs == 0:
        return model, []
    return _train_epochs(
        model,
        dataset,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        optimizer_kind=config.optimizer,
        grad_clip=config.grad_clip,
        target_accuracy=config.target_accuracy,
    )


def collect_activations(
    model: MLPModel, inputs: np.ndarray, layer_index: int
) -> Window:
    """Post-activation outputs of one layer, stacked row-wise as a Window."""
    if not (0 <= layer_index < len(model.layers)):
        raise ConfigError(
            f"layer_index {layer_index} out of range for {len(model.layers)} layers"
        )
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ConfigError("calibration inputs must be a non-empty (n, dim) array")
    _, hidden = mlp_forward(model, x, return_hidden=True)
    return Window(hidden[layer_index])


def reduce_layer(
    model: MLPModel,
    layer_index: int,
    calibration_inputs: np.ndarray,
    quantile: float = 0.5,
    k_min: int = DEFAULT_K_MIN,
) -> tuple[MLPModel, CompressionStageReport]:
    """Shrink one hidden layer's width to its above-bulk eigen-directions.

    Fits the MP model to the uncentered activation covariance spectrum
    (aspect = width / n_calib, which must stay below 1), keeps
    k = max(k_min, #outliers) top eigenvectors P, and folds the projection
    into the adjacent weights: W -> P^T W, b -> P^T b, W_next -> W_next P.
    If k equals the current width the model is returned unchanged and the
    report notes zero reduction.
    """
    if layer_index >= len(model.layers) - 1:
        raise ConfigError("the final logits layer cannot be reduced")
    width = model.layers[layer_index].weight.shape[0]
    n_calib = np.asarray(calibration_inputs).shape[0]
    if n_calib <= width:
        raise ConfigError(
            f"need more calibration samples ({n_calib}) than layer width "
            f"({width}) for a well-posed fit"
        )
    window = collect_activations(model, calibration_inputs, layer_index)
    spectrum = window_spectrum(window, centered=False, need_vectors=True)
    fitted = fit_mp_sigma(spectrum.eigenvalues, aspect=width / n_calib, quantile=quantile)
    k_out = count_outliers(spectrum.eigenvalues, fitted)
    kept = min(width, max(k_min, k_out))
    params_before = model.param_count()
    report = CompressionStageReport(
        layer_index=layer_index,
        eigenvalues=spectrum.eigenvalues.copy(),
        fitted=fitted,
        kept_k=kept,
        width_before=width,
        width_after=kept,
        params_before=params_before,
        params_after=params_before,
    )
    if kept >= width:
        report.width_after = width
        return model, report
    basis = spectrum.eigenvectors[:, :kept]  # (width, kept)
    reduced = model.copy()
    layer = reduced.layers[layer_index]
    reduced.layers[layer_index] = MLPLayer(
        weight=basis.T @ layer.weight,
        bias=basis.T @ layer.bias,
        activation=layer.activation,
    )
    nxt = reduced.layers[layer_index + 1]
    reduced.layers[layer_index + 1] = MLPLayer(
        weight=nxt.weight @ basis,
        bias=nxt.bias,
        activation=nxt.activation,
    )
    report.params_after = reduced.param_count()
    return reduced, report


def self_distill(
    student: MLPModel,
    teacher: MLPModel,
    dataset: MixtureDataset,
    config: DistillConfig = DistillConfig(),
) -> tuple[MLPModel, list[dict]]:
    """Fine-tune the student against frozen teacher logits plus task loss.

    Returns the best-validation-accuracy checkpoint.  The teacher is only
    evaluated, never modified.
    """
    if (
        student.input_dim != teacher.input_dim
        or student.output_dim != teacher.output_dim
    ):
        raise ContractError(
            "student and teacher must share input and output dimensions"
        )
    return _train_epochs(
        student,
        dataset,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        optimizer_kind=config.optimizer,
        grad_clip=config.grad_clip,
        teacher=teacher,
        alpha=config.alpha,
        temperature=config.temperature,
        select_best_val=True,
    )


def _calibration_subset(
    dataset: MixtureDataset, size: int, seed: int
) -> np.ndarray:
    """Deterministic calibration batch drawn from the training split only."""
    x_train, _ = dataset.subset("train")
    rng = make_rng(child_seed(seed, 11))
    perm = rng.permutation(x_train.shape[0])
    return x_train[perm[: min(size, x_train.shape[0])]]


def compress_pipeline(
    model: MLPModel,
    dataset: MixtureDataset,
    config: PipelineConfig = PipelineConfig(),
) -> tuple[MLPModel, list[CompressionStageReport], dict]:
    """Iterate reduce -> distill over hidden layers until the target is met.

    Hidden layers are visited first to last (the data dimension itself is
    never projected; the final logits layer is exempt).  Each stage's
    teacher is the previous checkpoint.  Stops once the parameter reduction
    reaches ``target_reduction`` or no layer can shrink; with
    ``target_reduction=0`` no stage executes.

    Raises AccuracyGateError if the incoming model's validation accuracy is
    below ``accuracy_gate``.
    """
    x_val, y_val = dataset.subset("val")
    x_test, y_test = dataset.subset("test")
    gate_acc = accuracy(model, x_val, y_val)
    if gate_acc < config.accuracy_gate:
        raise AccuracyGateError(
            f"validation accuracy {gate_acc:.4f} is below the gate "
            f"{config.accuracy_gate}; train the model longer first",
            measured=gate_acc,
        )
    params_start = model.param_count()
    acc_before = accuracy(model, x_test, y_test)
    calib = _calibration_subset(dataset, config.calibration_size, config.seed)
    reports: list[CompressionStageReport] = []
    current = model

    def reduction_so_far() -> float:
        return 1.0 - current.param_count() / params_start

    layer_order = (
        config.layer_order
        if config.layer_order is not None
        else tuple(range(len(model.layers) - 1))
    )
    for idx in layer_order:
        if not (0 <= idx < len(model.layers) - 1):
            raise ConfigError(f"layer_order index {idx} is not a hidden layer")
    done = config.target_reduction <= 0.0
    for _ in range(config.passes):
        if done:
            break
        shrunk_any = False
        for layer_index in layer_order:
            if reduction_so_far() >= config.target_reduction:
                done = True
                break
            teacher = current
            stage_acc_before = accuracy(current, x_test, y_test)
            reduced, report = reduce_layer(
                current,
                layer_index,
                calib,
                quantile=config.quantile,
                k_min=config.k_min,
            )
            report.acc_before = stage_acc_before
            if report.width_after >= report.width_before:
                reports.append(report)
                continue
            shrunk_any = True
            report.acc_after_projection = accuracy(reduced, x_test, y_test)
            student, _ = self_distill(reduced, teacher, dataset, config.distill)
            report.acc_after_distill = accuracy(student, x_test, y_test)
            current = student
            reports.append(report)
        if not shrunk_any:
            break
    acc_after = accuracy(current, x_test, y_test)
    summary = {
        "params_before": params_start,
        "params_after": current.param_count(),
        "reduction": reduction_so_far(),
        "acc_before": acc_before,
        "acc_after": acc_after,
        "stages": len(reports),
    }
    return current, reports, summary


def quantile_sweep(
    model: MLPModel,
    dataset: MixtureDataset,
    quantiles: list[float],
    config: PipelineConfig = PipelineConfig(),
) -> list[dict]:
    """Run the full compression pass per quantile from the same checkpoint.

    The sweep always exhausts a full pass (target_reduction=1) so the
    reduction column reflects the quantile alone.
    """
    for q in quantiles:
        if not (0.0 < q < 1.0):
            raise ConfigError(f"quantiles must be in (0,1), got {q}")
    rows = []
    for q in quantiles:
        cfg = replace(config, quantile=q, target_reduction=1.0)
        _, _, summary = compress_pipeline(model.copy(), dataset, cfg)
        rows.append(
            {
                "quantile": float(q),
                "reduction": summary["reduction"],
                "accuracy": summary["acc_after"],
            }
        )
    return rows


def save_mlp_json(model: MLPModel, path: str | Path) -> None:
    """Checkpoint format: layer shapes plus flat row-major weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "actspec-mlp-v1",
        "layers": [
            {
                "shape": list(l.weight.shape),
                "weight": [float(v) for v in l.weight.ravel()],
                "bias": [float(v) for v in l.bias],
                "activation": l.activation,
            }
            for l in model.layers
        ],
    }
    path.write_text(json.dumps(payload, sort_keys=True))


def load_mlp_json(path: str | Path) -> MLPModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        layers = [
            MLPLayer(
                weight=np.asarray(spec["weight"], dtype=float).reshape(spec["shape"]),
                bias=np.asarray(spec["bias"], dtype=float),
                activation=spec["activation"],
            )
            for spec in payload["layers"]
        ]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not a valid model checkpoint: {exc}") from exc
    return MLPModel(layers)
