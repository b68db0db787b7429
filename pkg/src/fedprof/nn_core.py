"""Dense MLP engine: initialization, forward pass with representation capture, SGD.

Models are immutable values. ``train_step`` returns a new :class:`Model`; the
input model is never modified, so clients can share the broadcast global model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, SpecificationError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
HEADS = ("softmax_nll", "linear_mse")


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...] = ()
    head: str = "softmax_nll"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise SpecificationError("a model needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise SpecificationError(f"layer sizes must be >= 1, got {sizes}")
        n_hidden = len(sizes) - 2
        acts = tuple(self.activations)
        if not acts:
            acts = ("relu",) * n_hidden
        elif len(acts) == 1 and n_hidden > 1:
            acts = acts * n_hidden
        if len(acts) != n_hidden:
            raise SpecificationError(
                f"{n_hidden} hidden layers but {len(acts)} activations given"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise SpecificationError(f"unknown activation {a!r}")
        if self.head not in HEADS:
            raise SpecificationError(f"unknown output head {self.head!r}")
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec: ModelSpec, vec: np.ndarray) -> "Model":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.n_params,):
            raise ContractError(f"expected {spec.n_params} parameters, got shape {vec.shape}")
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            weights.append(vec[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in).copy())
            pos += fan_out * fan_in
            biases.append(vec[pos:pos + fan_out].copy())
            pos += fan_out
        return cls(spec, tuple(weights), tuple(biases))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and all(
            np.all(np.isfinite(b)) for b in self.biases
        )


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=float))
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", np.asarray(self.targets))
        if x.shape[0] < 1:
            raise ContractError("batch must contain at least one sample")
        if self.targets.shape[0] != x.shape[0]:
            raise ContractError(
                f"{x.shape[0]} feature rows but {self.targets.shape[0]} targets"
            )

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class CaptureSelector:
    """Which representation to capture.

    ``layer`` indexes the dense layers (0 = first weight matrix). With
    ``fusion="sum_all"`` the captured units are summed within ``groups``
    contiguous equal-size groups, one output column per group.
    """

    layer: int = -1
    stage: Literal["pre_activation", "post_activation"] = "pre_activation"
    fusion: Literal["none", "sum_all"] = "none"
    groups: int = 1

    def resolve(self, spec: ModelSpec) -> int:
        idx = self.layer if self.layer >= 0 else spec.n_layers + self.layer
        if not 0 <= idx < spec.n_layers:
            raise ContractError(f"layer {self.layer} invalid for a {spec.n_layers}-layer model")
        if self.stage not in ("pre_activation", "post_activation"):
            raise ContractError(f"unknown capture stage {self.stage!r}")
        if self.fusion not in ("none", "sum_all"):
            raise ContractError(f"unknown fusion {self.fusion!r}")
        width = spec.layer_sizes[idx + 1]
        if self.groups < 1 or width % self.groups:
            raise ContractError(f"{self.groups} groups do not divide layer width {width}")
        return idx


def default_selector(spec: ModelSpec) -> CaptureSelector:
    """Last hidden layer, pre-activation (the output layer if there is none)."""
    return CaptureSelector(layer=max(spec.n_layers - 2, 0))


def init_model(spec: ModelSpec, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Model(spec, tuple(weights), tuple(biases))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_input(model: Model, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != model.spec.layer_sizes[0]:
        raise ContractError(
            f"feature shape {x.shape} incompatible with input dim {model.spec.layer_sizes[0]}"
        )


def _forward(model: Model, x: np.ndarray):
    """Return pre-activations and post-activations of every layer."""
    zs, acts = [], [x]
    a = x
    last = model.spec.n_layers - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        if i < last:
            a = _activate(model.spec.activations[i], z)
        elif model.spec.head == "softmax_nll":
            a = softmax(z)
        else:
            a = z
        zs.append(z)
        acts.append(a)
    return zs, acts


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    _check_input(model, x)
    return _forward(model, x)[1][-1]


def forward_capture(model: Model, batch: Batch, sel: CaptureSelector):
    """Return ``(outputs, captured)`` for ``batch``.

    ``captured`` has one row per sample. Post-activation capture of the output
    layer yields the head output (softmax probabilities or the linear output).
    """
    idx = sel.resolve(model.spec)
    _check_input(model, batch.features)
    zs, acts = _forward(model, batch.features)
    captured = zs[idx] if sel.stage == "pre_activation" else acts[idx + 1]
    if sel.fusion == "sum_all":
        n, width = captured.shape
        captured = captured.reshape(n, sel.groups, width // sel.groups).sum(axis=2)
    return acts[-1], captured


def _targets_matrix(model: Model, targets: np.ndarray) -> np.ndarray:
    n_out = model.spec.layer_sizes[-1]
    if model.spec.head == "softmax_nll":
        t = np.asarray(targets).astype(int).ravel()
        if t.min() < 0 or t.max() >= n_out:
            raise ContractError(f"class labels must lie in [0, {n_out})")
        return t
    y = np.asarray(targets, dtype=float).reshape(len(targets), -1)
    if y.shape[1] != n_out:
        raise ContractError(f"targets have {y.shape[1]} columns, model outputs {n_out}")
    return y


def loss_and_grads(model: Model, batch: Batch):
    """Mean batch loss and its gradients w.r.t. every weight and bias."""
    _check_input(model, batch.features)
    y = _targets_matrix(model, batch.targets)
    zs, acts = _forward(model, batch.features)
    n = batch.features.shape[0]
    out = acts[-1]
    if model.spec.head == "softmax_nll":
        logp = zs[-1] - zs[-1].max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), y].mean()
        delta = out.copy()
        delta[np.arange(n), y] -= 1.0
        delta /= n
    else:
        diff = out - y
        loss = np.mean(diff * diff)
        delta = 2.0 * diff / diff.size

    gw = [None] * model.spec.n_layers
    gb = [None] * model.spec.n_layers
    for i in range(model.spec.n_layers - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            back = delta @ model.weights[i]
            delta = back * _activation_grad(model.spec.activations[i - 1], zs[i - 1], acts[i])
    return float(loss), gw, gb


def train_step(
    model: Model,
    batch: Batch,
    lr: float,
    prox: Optional[tuple[float, Model]] = None,
) -> tuple[Model, float]:
    """One SGD step on the mean batch loss; returns ``(new_model, pre_step_loss)``.

    ``prox=(mu, anchor)`` adds the proximal gradient ``mu * (theta - anchor)``.
    The returned loss is the data loss only, without the proximal penalty.
    """
    if not lr >= 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    loss, gw, gb = loss_and_grads(model, batch)
    if prox is not None:
        mu, anchor = prox
        if anchor.spec.layer_sizes != model.spec.layer_sizes:
            raise ContractError("proximal anchor has a different architecture")
        gw = [g + mu * (w - a) for g, w, a in zip(gw, model.weights, anchor.weights)]
        gb = [g + mu * (b - a) for g, b, a in zip(gb, model.biases, anchor.biases)]
    gnorm = float(np.sqrt(sum(np.sum(g * g) for g in gw) + sum(np.sum(g * g) for g in gb)))
    if not (np.isfinite(loss) and np.isfinite(gnorm)):
        raise NumericError(
            "non-finite loss or gradient",
            {"loss": loss, "grad_norm": gnorm, "lr": lr, "batch_size": len(batch)},
        )
    weights = tuple(w - lr * g for w, g in zip(model.weights, gw))
    biases = tuple(b - lr * g for b, g in zip(model.biases, gb))
    return Model(model.spec, weights, biases), loss


def evaluate(model: Model, dataset: Batch, metric: str = "accuracy") -> float:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    out = predict(model, dataset.features)
    if metric == "accuracy":
        labels = np.asarray(dataset.targets).astype(int).ravel()
        # np.argmax returns the lowest index among ties
        return float(np.mean(np.argmax(out, axis=1) == labels))
    if metric == "mse":
        y = np.asarray(dataset.targets, dtype=float).reshape(out.shape[0], -1)
        return float(np.mean((out - y) ** 2))
    raise ContractError(f"unknown metric {metric!r}")


def model_from_arrays(spec: ModelSpec, weights: Sequence, biases: Sequence) -> Model:
    """Build a model from explicit parameter arrays (tests, hand-built fixtures)."""
    ws = tuple(np.array(w, dtype=float, ndmin=2) for w in weights)
    bs = tuple(np.array(b, dtype=float, ndmin=1) for b in biases)
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        if ws[i].shape != (fan_out, fan_in) or bs[i].shape != (fan_out,):
            raise ContractError(f"layer {i} parameter shapes do not match the spec")
    return Model(spec, ws, bs)
