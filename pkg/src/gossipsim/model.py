"""Small hand-differentiated classifiers over flat parameter vectors.

Parameters live in one contiguous float64 vector; ``segments`` records how it
splits into named tensors so dispersion can be measured per tensor.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from gossipsim.errors import ConfigError, NumericalError

__all__ = [
    "ModelKind",
    "ModelSpec",
    "Segment",
    "ParamVector",
    "Batch",
    "layout",
    "param_count",
    "init_params",
    "loss_and_grad",
    "forward_backward",
    "predict",
    "accuracy",
    "tensor_l2_norms",
]


class ModelKind(str, enum.Enum):
    LINEAR = "linear"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_dim: int
    output_dim: int
    hidden_dim: int | None = None
    seed: int = 0
    bias: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("model dims must be >= 1", key="model")
        if self.kind is ModelKind.MLP:
            if self.hidden_dim is None or self.hidden_dim < 1:
                raise ConfigError("mlp model needs hidden_dim >= 1", key="model")


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        pos = 0
        for seg in self.segments:
            if seg.offset != pos or seg.length != math.prod(seg.shape) or seg.length < 1:
                raise ValueError(f"segment {seg.name!r} does not tile the vector at offset {pos}")
            pos += seg.length
        if self.values.ndim != 1 or pos != self.values.shape[0]:
            raise ValueError(
                f"segments cover {pos} values but the vector has shape {self.values.shape}"
            )
        if self.values.dtype != np.float64:
            raise ValueError("parameter vectors are float64")

    def tensor(self, name: str) -> np.ndarray:
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [seg.name for seg in self.segments]


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"batch inputs must be a non-empty matrix, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("batch labels must be a vector matching the input rows")


def layout(spec: ModelSpec) -> tuple[Segment, ...]:
    if spec.kind is ModelKind.LINEAR:
        shapes = [("weight", (spec.input_dim, spec.output_dim)), ("bias", (spec.output_dim,))]
    else:
        h = spec.hidden_dim
        assert h is not None
        shapes = [
            ("fc1.weight", (spec.input_dim, h)),
            ("fc1.bias", (h,)),
            ("fc2.weight", (h, spec.output_dim)),
            ("fc2.bias", (spec.output_dim,)),
        ]
    if not spec.bias:
        shapes = [s for s in shapes if not s[0].endswith("bias")]
    segs = []
    offset = 0
    for name, shape in shapes:
        length = math.prod(shape)
        segs.append(Segment(name, offset, length, shape))
        offset += length
    return tuple(segs)


def param_count(spec: ModelSpec) -> int:
    last = layout(spec)[-1]
    return last.offset + last.length


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


def init_params(spec: ModelSpec) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(spec.seed)
    segs = layout(spec)
    values = np.zeros(param_count(spec), dtype=np.float64)
    for seg in segs:
        if len(seg.shape) == 2:
            bound = 1.0 / math.sqrt(seg.shape[0])
            values[seg.offset : seg.offset + seg.length] = rng.uniform(-bound, bound, seg.length)
    return ParamVector(_frozen(values), segs)


def _views(values: np.ndarray, spec: ModelSpec) -> dict[str, np.ndarray]:
    return {s.name: values[s.offset : s.offset + s.length].reshape(s.shape) for s in layout(spec)}


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _affine(x: np.ndarray, p: dict[str, np.ndarray], w: str, b: str) -> np.ndarray:
    out = x @ p[w]
    if b in p:
        out += p[b]
    return out


def _logits(values: np.ndarray, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    p = _views(values, spec)
    if spec.kind is ModelKind.LINEAR:
        return _affine(inputs, p, "weight", "bias")
    return _affine(np.tanh(_affine(inputs, p, "fc1.weight", "fc1.bias")), p, "fc2.weight", "fc2.bias")


def forward_backward(
    values: np.ndarray, spec: ModelSpec, inputs: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient as a flat vector.

    Raw-array core of :func:`loss_and_grad`, used by the engine's inner loop.
    """
    b = inputs.shape[0]
    rows = np.arange(b)
    p = _views(values, spec)
    grad = np.empty_like(values)
    g = _views(grad, spec)

    if spec.kind is ModelKind.LINEAR:
        logp = _log_softmax(_affine(inputs, p, "weight", "bias"))
        dlogits = np.exp(logp)
        dlogits[rows, labels] -= 1.0
        dlogits /= b
        g["weight"][...] = inputs.T @ dlogits
        if "bias" in g:
            g["bias"][...] = dlogits.sum(axis=0)
    else:
        hidden = np.tanh(_affine(inputs, p, "fc1.weight", "fc1.bias"))
        logp = _log_softmax(_affine(hidden, p, "fc2.weight", "fc2.bias"))
        dlogits = np.exp(logp)
        dlogits[rows, labels] -= 1.0
        dlogits /= b
        g["fc2.weight"][...] = hidden.T @ dlogits
        if "fc2.bias" in g:
            g["fc2.bias"][...] = dlogits.sum(axis=0)
        dpre = (dlogits @ p["fc2.weight"].T) * (1.0 - hidden * hidden)
        g["fc1.weight"][...] = inputs.T @ dpre
        if "fc1.bias" in g:
            g["fc1.bias"][...] = dpre.sum(axis=0)

    loss = float(-logp[rows, labels].mean())
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite loss or gradient (loss={loss})")
    return loss, grad


def loss_and_grad(
    params: ParamVector, spec: ModelSpec, batch: Batch
) -> tuple[float, ParamVector]:
    if params.segments != layout(spec):
        raise ValueError("parameter layout does not match the model spec")
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch has {batch.inputs.shape[1]} features, model expects {spec.input_dim}"
        )
    if np.any(batch.labels < 0) or np.any(batch.labels >= spec.output_dim):
        raise ValueError(f"labels must lie in [0, {spec.output_dim})")
    loss, grad = forward_backward(params.values, spec, batch.inputs, batch.labels)
    return loss, ParamVector(_frozen(grad), params.segments)


def predict(values: np.ndarray, spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(_logits(values, spec, inputs), axis=1)


def accuracy(values: np.ndarray, spec: ModelSpec, inputs: np.ndarray, labels: np.ndarray) -> float:
    if labels.shape[0] == 0:
        return float("nan")
    return float(np.mean(predict(values, spec, inputs) == labels))


def tensor_l2_norms(params: ParamVector) -> list[tuple[str, float]]:
    return [
        (seg.name, float(np.linalg.norm(params.values[seg.offset : seg.offset + seg.length])))
        for seg in params.segments
    ]
