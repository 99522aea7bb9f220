from __future__ import annotations

import logging
import math
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, field
from enum import IntEnum, auto
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError, TrainingError

if TYPE_CHECKING:
    from typing import TypeAlias

logger = logging.getLogger(__name__)

NDArray: TypeAlias = 'np.ndarray[Any, Any]'

#
# constants
#

ADAM_BETA1       = 0.9
ADAM_BETA2       = 0.999
ADAM_EPS         = 1e-8
LSTM_FORGET_BIAS = 1.0
PROB_CLAMP       = 1e-12

GRADCHECK_STEP           = 1e-5
GRADCHECK_FLOOR          = 1e-3
GRADCHECK_MAX_PARAMETERS = 5000

#
# layer specs
#


class LayerKind(IntEnum):
    DENSE    : int = auto()
    CONV1D   : int = auto()
    LSTM     : int = auto()
    SOFTMAX  : int = auto()
    EMBEDDING: int = auto()


class Activation(IntEnum):
    IDENTITY = 0
    RELU     = 1
    TANH     = 2


class OptimizerKind(IntEnum):
    SGD  = 0
    ADAM = 1


LAYER_KIND_NAMES: dict[LayerKind, str] = {
    LayerKind.DENSE:     "dense",
    LayerKind.CONV1D:    "conv1d",
    LayerKind.LSTM:      "lstm",
    LayerKind.SOFTMAX:   "softmax",
    LayerKind.EMBEDDING: "embedding",
}

ACTIVATION_NAMES: dict[Activation, str] = {
    Activation.IDENTITY: "identity",
    Activation.RELU:     "relu",
    Activation.TANH:     "tanh",
}

OPTIMIZER_KIND_NAMES: dict[OptimizerKind, str] = {
    OptimizerKind.SGD:  "sgd",
    OptimizerKind.ADAM: "adam",
}

# layers whose output keeps the sequence axis
SEQUENCE_OUTPUT_KINDS = (LayerKind.EMBEDDING,)
# layers that must receive a [B x T x F] sequence
SEQUENCE_INPUT_KINDS  = (LayerKind.CONV1D, LayerKind.LSTM, LayerKind.EMBEDDING)


def _lookup(names: dict[Any, str], name: str, what: str) -> Any:
    for key, value in names.items():
        if value == name:
            return key
    raise ConfigError(what, f"unknown value {name!r}, expected one of {sorted(names.values())}")


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    kernel_width: int = 0
    activation: Activation = Activation.IDENTITY

    def validate(self, index: int) -> None:
        prefix = f"layers[{index}]"
        if self.in_dim < 1:
            raise ConfigError(f"{prefix}.in_dim", f"must be positive, got {self.in_dim}")
        if self.out_dim < 1:
            raise ConfigError(f"{prefix}.out_dim", f"must be positive, got {self.out_dim}")
        if self.kind == LayerKind.CONV1D and self.kernel_width < 1:
            raise ConfigError(f"{prefix}.kernel_width", f"must be positive, got {self.kernel_width}")
        if self.kind == LayerKind.SOFTMAX and self.in_dim != self.out_dim:
            raise ConfigError(f"{prefix}.out_dim", "softmax must have in_dim == out_dim")
        if self.kind == LayerKind.EMBEDDING and self.in_dim < 2:
            raise ConfigError(f"{prefix}.in_dim", "embedding vocabulary needs the null token plus at least one item")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind":         LAYER_KIND_NAMES[self.kind],
            "in_dim":       self.in_dim,
            "out_dim":      self.out_dim,
            "kernel_width": self.kernel_width,
            "activation":   ACTIVATION_NAMES[self.activation],
        }

    @staticmethod
    def from_dict(doc: dict[str, Any]) -> LayerSpec:
        return LayerSpec(
            kind         = _lookup(LAYER_KIND_NAMES, doc["kind"], "kind"),
            in_dim       = int(doc["in_dim"]),
            out_dim      = int(doc["out_dim"]),
            kernel_width = int(doc.get("kernel_width", 0)),
            activation   = _lookup(ACTIVATION_NAMES, doc.get("activation", "identity"), "activation"),
        )


def dense(in_dim: int, out_dim: int, activation: Activation = Activation.IDENTITY) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, in_dim, out_dim, activation = activation)

def conv1d(in_dim: int, out_dim: int, kernel_width: int) -> LayerSpec:
    return LayerSpec(LayerKind.CONV1D, in_dim, out_dim, kernel_width = kernel_width)

def lstm(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(LayerKind.LSTM, in_dim, out_dim)

def softmax(n: int) -> LayerSpec:
    return LayerSpec(LayerKind.SOFTMAX, n, n)

def embedding(num_tokens: int, dim: int) -> LayerSpec:
    return LayerSpec(LayerKind.EMBEDDING, num_tokens, dim)

#
# elementwise helpers
#


def sigmoid(z: NDArray) -> NDArray:
    return np.exp(-np.logaddexp(0.0, -z))


def softmax_rows(z: NDArray) -> NDArray:
    shifted = z - z.max(axis = -1, keepdims = True)
    e = np.exp(shifted)
    return e / e.sum(axis = -1, keepdims = True)


def _activate(activation: Activation, z: NDArray) -> NDArray:
    if activation == Activation.RELU:
        return np.maximum(z, 0.0)
    if activation == Activation.TANH:
        return np.tanh(z)
    return z


def _activation_grad(activation: Activation, grad: NDArray, z: NDArray, a: NDArray) -> NDArray:
    if activation == Activation.RELU:
        return grad * (z > 0.0)
    if activation == Activation.TANH:
        return grad * (1.0 - a * a)
    return grad


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> NDArray:
    bound = 1.0 / math.sqrt(fan_in)
    return np.ascontiguousarray(rng.uniform(-bound, bound, size = shape))

#
# layers
#


class Layer(metaclass=ABCMeta):
    spec: LayerSpec
    index: int
    params: list[NDArray]

    def __init__(self, spec: LayerSpec, index: int) -> None:
        self.spec   = spec
        self.index  = index
        self.params = []
        self._cache: Any = None

    @abstractmethod
    def param_shapes(self) -> list[tuple[int, ...]]: ...
    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> None: ...
    @abstractmethod
    def forward(self, x: NDArray) -> NDArray: ...
    @abstractmethod
    def backward(self, grad: NDArray) -> tuple[NDArray | None, list[NDArray]]: ...

    def zero_params(self) -> None:
        self.params = [np.zeros(shape) for shape in self.param_shapes()]

    def clear_cache(self) -> None:
        self._cache = None

    def _cached(self) -> Any:
        if self._cache is None:
            raise StateError(f"layer {self.index}: backward called before forward")
        return self._cache

    def _expect_sequence(self, x: NDArray, features: int | None) -> None:
        if x.ndim != 3:
            raise ShapeError(f"{LAYER_KIND_NAMES[self.spec.kind]} expects a [batch x time x feature] input, got shape {x.shape}", self.index)
        if features is not None and x.shape[2] != features:
            raise ShapeError(f"{LAYER_KIND_NAMES[self.spec.kind]} expects {features} features, got {x.shape[2]}", self.index)


class DenseLayer(Layer):
    def param_shapes(self) -> list[tuple[int, ...]]:
        return [(self.spec.in_dim, self.spec.out_dim), (self.spec.out_dim,)]

    def init_params(self, rng: np.random.Generator) -> None:
        fan_in = self.spec.in_dim
        self.params = [_uniform(rng, shape, fan_in) for shape in self.param_shapes()]

    def forward(self, x: NDArray) -> NDArray:
        # sequence inputs are flattened, e.g. one-hot [1 x F] states
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.spec.in_dim:
            raise ShapeError(f"dense expects {self.spec.in_dim} input features, got {flat.shape[1]}", self.index)
        w, b = self.params
        z = flat @ w + b
        a = _activate(self.spec.activation, z)
        self._cache = (x.shape, flat, z, a)
        return a

    def backward(self, grad: NDArray) -> tuple[NDArray | None, list[NDArray]]:
        shape, flat, z, a = self._cached()
        w = self.params[0]
        dz = _activation_grad(self.spec.activation, grad, z, a)
        dw = flat.T @ dz
        db = dz.sum(axis = 0)
        dx = (dz @ w.T).reshape(shape)
        return dx, [dw, db]


class Conv1DLayer(Layer):
    """Valid 1-D convolution over the time axis followed by global max-pooling."""

    def param_shapes(self) -> list[tuple[int, ...]]:
        s = self.spec
        return [(s.kernel_width, s.in_dim, s.out_dim), (s.out_dim,)]

    def init_params(self, rng: np.random.Generator) -> None:
        fan_in = self.spec.kernel_width * self.spec.in_dim
        self.params = [_uniform(rng, shape, fan_in) for shape in self.param_shapes()]

    def forward(self, x: NDArray) -> NDArray:
        self._expect_sequence(x, self.spec.in_dim)
        k     = self.spec.kernel_width
        n_t   = x.shape[1]
        if n_t < k:
            raise ShapeError(f"kernel width {k} exceeds sequence length {n_t}", self.index)
        steps = n_t - k + 1
        cols  = np.concatenate([x[:, j:j + steps, :] for j in range(k)], axis = 2)
        w, b  = self.params
        wflat = w.reshape(k * self.spec.in_dim, self.spec.out_dim)
        z     = cols @ wflat + b
        idx   = z.argmax(axis = 1)
        out   = np.take_along_axis(z, idx[:, None, :], axis = 1)[:, 0, :]
        self._cache = (x.shape, cols, idx, steps)
        return out

    def backward(self, grad: NDArray) -> tuple[NDArray | None, list[NDArray]]:
        shape, cols, idx, steps = self._cached()
        k, n_f, n_c = self.params[0].shape
        dz = np.zeros((shape[0], steps, n_c))
        np.put_along_axis(dz, idx[:, None, :], grad[:, None, :], axis = 1)
        wflat = self.params[0].reshape(k * n_f, n_c)
        dw    = np.einsum('bsi,bsc->ic', cols, dz).reshape(k, n_f, n_c)
        db    = dz.sum(axis = (0, 1))
        dcols = dz @ wflat.T
        dx    = np.zeros(shape)
        for j in range(k):
            dx[:, j:j + steps, :] += dcols[:, :, j * n_f:(j + 1) * n_f]
        return dx, [dw, db]


class LSTMLayer(Layer):
    """LSTM over the full sequence emitting the final hidden state.

    Gate layout in the fused weight matrix is (input, forget, output, candidate);
    the weight rows are [x_t, h_{t-1}].
    """

    def param_shapes(self) -> list[tuple[int, ...]]:
        s = self.spec
        return [(s.in_dim + s.out_dim, 4 * s.out_dim), (4 * s.out_dim,)]

    def init_params(self, rng: np.random.Generator) -> None:
        fan_in = self.spec.in_dim + self.spec.out_dim
        w, b = [_uniform(rng, shape, fan_in) for shape in self.param_shapes()]
        n_h = self.spec.out_dim
        b[n_h:2 * n_h] = LSTM_FORGET_BIAS
        self.params = [w, b]

    def forward(self, x: NDArray) -> NDArray:
        self._expect_sequence(x, self.spec.in_dim)
        n_b, n_t, _ = x.shape
        n_h  = self.spec.out_dim
        w, b = self.params
        h = np.zeros((n_b, n_h))
        c = np.zeros((n_b, n_h))
        steps = []
        for t in range(n_t):
            hx = np.concatenate([x[:, t, :], h], axis = 1)
            z  = hx @ w + b
            i  = sigmoid(z[:, :n_h])
            f  = sigmoid(z[:, n_h:2 * n_h])
            o  = sigmoid(z[:, 2 * n_h:3 * n_h])
            g  = np.tanh(z[:, 3 * n_h:])
            c_prev = c
            c  = f * c_prev + i * g
            tc = np.tanh(c)
            h  = o * tc
            steps.append((hx, i, f, o, g, c_prev, tc))
        self._cache = (x.shape, steps)
        return h

    def backward(self, grad: NDArray) -> tuple[NDArray | None, list[NDArray]]:
        shape, steps = self._cached()
        n_f  = self.spec.in_dim
        w, b = self.params
        dw = np.zeros_like(w)
        db = np.zeros_like(b)
        dx = np.zeros(shape)
        dh = grad
        dc = np.zeros_like(grad)
        for t in reversed(range(len(steps))):
            hx, i, f, o, g, c_prev, tc = steps[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ], axis = 1)
            dw += hx.T @ dz
            db += dz.sum(axis = 0)
            dhx = dz @ w.T
            dx[:, t, :] = dhx[:, :n_f]
            dh = dhx[:, n_f:]
            dc = dc * f
        return dx, [dw, db]


class SoftmaxLayer(Layer):
    def param_shapes(self) -> list[tuple[int, ...]]:
        return []

    def init_params(self, rng: np.random.Generator) -> None:
        self.params = []

    def forward(self, x: NDArray) -> NDArray:
        # a [1 x F] logits row arrives as [B x 1 x F] when softmax is the first layer
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.spec.in_dim:
            raise ShapeError(f"softmax expects {self.spec.in_dim} logits, got shape {x.shape}", self.index)
        p = softmax_rows(flat)
        self._cache = (x.shape, p)
        return p

    def backward(self, grad: NDArray) -> tuple[NDArray | None, list[NDArray]]:
        shape, p = self._cached()
        dx = p * (grad - (grad * p).sum(axis = 1, keepdims = True))
        return dx.reshape(shape), []


class EmbeddingLayer(Layer):
    """Token ids -> learned rows. Token 0 is the null (padding) token and maps to zeros."""

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [(self.spec.in_dim, self.spec.out_dim)]

    def init_params(self, rng: np.random.Generator) -> None:
        w = _uniform(rng, self.param_shapes()[0], 1)
        w[0] = 0.0
        self.params = [w]

    def forward(self, x: NDArray) -> NDArray:
        self._expect_sequence(x, 1)
        ids = x[:, :, 0].astype(np.int64)
        if not np.array_equal(ids, x[:, :, 0]):
            raise ShapeError("embedding input must hold integral token ids", self.index)
        if ids.size and (ids.min() < 0 or ids.max() >= self.spec.in_dim):
            raise ShapeError(f"token id out of range [0, {self.spec.in_dim})", self.index)
        mask = (ids != 0)[:, :, None]
        out = self.params[0][ids] * mask
        self._cache = (ids, mask)
        return out

    def backward(self, grad: NDArray) -> tuple[NDArray | None, list[NDArray]]:
        ids, mask = self._cached()
        dw = np.zeros_like(self.params[0])
        np.add.at(dw, ids, grad * mask)
        return None, [dw]


LAYER_CLASSES: dict[LayerKind, type[Layer]] = {
    LayerKind.DENSE:     DenseLayer,
    LayerKind.CONV1D:    Conv1DLayer,
    LayerKind.LSTM:      LSTMLayer,
    LayerKind.SOFTMAX:   SoftmaxLayer,
    LayerKind.EMBEDDING: EmbeddingLayer,
}

#
# network
#


class Network:
    specs: list[LayerSpec]
    layers: list[Layer]
    seed: int

    def __init__(self, specs: Sequence[LayerSpec], seed: int = 0, initialize: bool = True) -> None:
        if len(specs) == 0:
            raise ConfigError("layers", "a network needs at least one layer")
        self.specs = list(specs)
        self.seed  = seed
        for i, spec in enumerate(self.specs):
            spec.validate(i)
        self._check_compatible()
        self.layers = [LAYER_CLASSES[spec.kind](spec, i) for i, spec in enumerate(self.specs)]
        if initialize:
            rng = np.random.default_rng(seed)
            for layer in self.layers:
                layer.init_params(rng)
        else:
            for layer in self.layers:
                layer.zero_params()
        self._single = False
        self._forward_done = False

    def _check_compatible(self) -> None:
        for i in range(1, len(self.specs)):
            prev, spec = self.specs[i - 1], self.specs[i]
            if spec.kind in SEQUENCE_INPUT_KINDS and prev.kind not in SEQUENCE_OUTPUT_KINDS:
                raise ConfigError(f"layers[{i}].kind", f"{LAYER_KIND_NAMES[spec.kind]} needs a sequence input but follows {LAYER_KIND_NAMES[prev.kind]}")
            if spec.kind == LayerKind.DENSE and prev.kind in SEQUENCE_OUTPUT_KINDS:
                # flattening: the width depends on the sequence length at use time
                continue
            if prev.out_dim != spec.in_dim:
                raise ConfigError(f"layers[{i}].in_dim", f"expected {prev.out_dim} to match layer {i - 1}, got {spec.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def parameters(self) -> list[NDArray]:
        return [p for layer in self.layers for p in layer.params]

    def parameter_owners(self) -> list[int]:
        return [layer.index for layer in self.layers for _ in layer.params]

    def num_parameters(self) -> int:
        return sum(int(p.size) for p in self.parameters())

    def set_parameters(self, values: Sequence[NDArray]) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise ShapeError(f"expected {len(params)} parameter tensors, got {len(values)}")
        for owner, dst, src in zip(self.parameter_owners(), params, values):
            src = np.asarray(src, dtype = np.float64)
            if src.shape != dst.shape:
                raise ShapeError(f"parameter shape {src.shape} does not match {dst.shape}", owner)
            dst[...] = src

    def copy(self) -> Network:
        clone = Network(self.specs, self.seed, initialize = False)
        clone.set_parameters(self.parameters())
        return clone

    def forward(self, x: Any) -> NDArray:
        x = np.asarray(x, dtype = np.float64)
        if x.ndim == 2:
            self._single = True
            x = x[None, :, :]
        elif x.ndim == 3:
            self._single = False
        else:
            raise ShapeError(f"expected a [time x feature] or [batch x time x feature] input, got shape {x.shape}", 0)
        for layer in self.layers:
            x = layer.forward(x)
        self._forward_done = True
        return x[0] if self._single else x

    def backward(self, upstream_gradient: Any, logits_gradient: bool = False) -> list[NDArray]:
        """Reverse accumulation from the output (or, with logits_gradient, from the
        input of a trailing softmax). Returns one gradient per parameter tensor, in
        the order of parameters()."""
        if not self._forward_done:
            raise StateError("backward called before forward")
        layers = self.layers
        if logits_gradient:
            if layers[-1].spec.kind != LayerKind.SOFTMAX:
                raise ShapeError("logits gradient requires a trailing softmax layer", layers[-1].index)
            layers = layers[:-1]
        grad = np.asarray(upstream_gradient, dtype = np.float64)
        if self._single:
            grad = grad[None, ...]
        expected = layers[-1].spec.out_dim
        if grad.ndim != 2 or grad.shape[1] != expected:
            raise ShapeError(f"upstream gradient of shape {grad.shape} does not match output width {expected}", layers[-1].index)

        per_layer: dict[int, list[NDArray]] = {}
        g: NDArray | None = grad
        for layer in reversed(layers):
            if g is None:
                per_layer[layer.index] = [np.zeros_like(p) for p in layer.params]
                continue
            g, grads = layer.backward(g)
            per_layer[layer.index] = grads
        if logits_gradient:
            per_layer[self.layers[-1].index] = []
        return [gp for layer in self.layers for gp in per_layer[layer.index]]

    def __repr__(self) -> str:
        kinds = ', '.join(LAYER_KIND_NAMES[s.kind] for s in self.specs)
        return f"<Network [{kinds}] with {self.num_parameters()} parameters, seed {self.seed}>"

#
# losses
#

_clamp_count = 0


def clamped_probability_count() -> int:
    return _clamp_count


def mse_loss(prediction: Any, target: Any) -> tuple[float, NDArray]:
    p = np.asarray(prediction, dtype = np.float64)
    t = np.asarray(target, dtype = np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction shape {p.shape} != target shape {t.shape}")
    e = p - t
    n = max(e.size, 1)
    return float(np.mean(e * e)), 2.0 * e / n


def huber_elementwise(residual: Any, delta: float) -> NDArray:
    e = np.asarray(residual, dtype = np.float64)
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * a - 0.5 * delta * delta)


def huber_loss(prediction: Any, target: Any, delta: float = 2.0) -> tuple[float, NDArray]:
    if not delta > 0:
        raise ConfigError("delta", f"huber delta must be positive, got {delta}")
    p = np.asarray(prediction, dtype = np.float64)
    t = np.asarray(target, dtype = np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"huber_loss: prediction shape {p.shape} != target shape {t.shape}")
    e = p - t
    n = max(e.size, 1)
    psi = np.where(np.abs(e) <= delta, e, delta * np.sign(e))
    return float(np.mean(huber_elementwise(e, delta))), psi / n


def cross_entropy_loss(probabilities: Any, action_index: int, weight: float) -> tuple[float, NDArray]:
    """Weighted categorical cross entropy; the gradient is w.r.t. the softmax logits."""
    global _clamp_count
    p = np.asarray(probabilities, dtype = np.float64)
    if p.ndim != 1:
        raise ShapeError(f"cross_entropy_loss expects a probability vector, got shape {p.shape}")
    if not 0 <= action_index < p.size:
        raise ShapeError(f"action index {action_index} out of range for {p.size} probabilities")
    pa = float(p[action_index])
    if pa < PROB_CLAMP:
        if _clamp_count == 0:
            logger.warning("cross entropy: probability %g of action %d clamped to %g", pa, action_index, PROB_CLAMP)
        _clamp_count += 1
        pa = PROB_CLAMP
    grad = weight * p
    grad[action_index] -= weight
    if weight == 0:
        return 0.0, grad
    return -weight * math.log(pa), grad

#
# optimizers
#


@dataclass
class OptimizerState:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    m: list[NDArray] = field(default_factory = list)
    v: list[NDArray] = field(default_factory = list)
    step: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be positive, got {self.learning_rate}")


def make_optimizer(kind: OptimizerKind | str, learning_rate: float, network: Network) -> OptimizerState:
    if isinstance(kind, str):
        kind = _lookup(OPTIMIZER_KIND_NAMES, kind, "optimizer")
    opt = OptimizerState(kind = OptimizerKind(kind), learning_rate = learning_rate)
    opt.validate()
    if opt.kind == OptimizerKind.ADAM:
        opt.m = [np.zeros_like(p) for p in network.parameters()]
        opt.v = [np.zeros_like(p) for p in network.parameters()]
    return opt


def optimizer_step(optimizer: OptimizerState, network: Network, gradients: Sequence[NDArray]) -> Network:
    params = network.parameters()
    owners = network.parameter_owners()
    if len(gradients) != len(params):
        raise ShapeError(f"expected {len(params)} gradient tensors, got {len(gradients)}")
    for owner, p, g in zip(owners, params, gradients):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}", owner)
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", owner)

    optimizer.step += 1
    lr = optimizer.learning_rate
    if optimizer.kind == OptimizerKind.SGD:
        for p, g in zip(params, gradients):
            p -= lr * g
        return network

    if len(optimizer.m) != len(params):
        optimizer.m = [np.zeros_like(p) for p in params]
        optimizer.v = [np.zeros_like(p) for p in params]
    b1, b2, t = optimizer.beta1, optimizer.beta2, optimizer.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, gradients, optimizer.m, optimizer.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + optimizer.eps)
    return network

#
# gradient checking
#


@dataclass
class GradCheckReport:
    max_relative_error: float
    failures: list[tuple[int, int]]
    checked: int
    passed: bool


LossFn = Callable[[NDArray], tuple[float, NDArray]]


def grad_check(network: Network, loss_fn: LossFn, input: Any, tolerance: float = 1e-4,
               step: float = GRADCHECK_STEP, logits_gradient: bool = False) -> GradCheckReport:
    """Compare backward() against central finite differences of loss_fn(forward(input)).

    failures holds (parameter tensor index, flat element index) pairs.
    """
    if network.num_parameters() > GRADCHECK_MAX_PARAMETERS:
        raise ConfigError("network", f"{network.num_parameters()} parameters exceed the gradient-check limit of {GRADCHECK_MAX_PARAMETERS}")
    _, upstream = loss_fn(network.forward(input))
    analytic = network.backward(upstream, logits_gradient = logits_gradient)

    worst = 0.0
    failures: list[tuple[int, int]] = []
    checked = 0
    for pi, param in enumerate(network.parameters()):
        flat  = param.reshape(-1)
        aflat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            loss_plus, _ = loss_fn(network.forward(input))
            flat[j] = orig - step
            loss_minus, _ = loss_fn(network.forward(input))
            flat[j] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            err = abs(aflat[j] - numeric) / max(abs(numeric), GRADCHECK_FLOOR)
            checked += 1
            worst = max(worst, err)
            if not err < tolerance:
                failures.append((pi, j))
    network.forward(input)
    return GradCheckReport(max_relative_error = worst, failures = failures, checked = checked, passed = not failures)


def run_gradcheck_suite(tolerance: float = 1e-4, seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Gradient checks for every layer kind and loss on small random networks."""
    rng = np.random.default_rng(seed)
    results: list[tuple[str, GradCheckReport]] = []

    def regression(loss: Callable[[Any, Any], tuple[float, NDArray]], target: NDArray) -> LossFn:
        return lambda out: loss(out, target)

    x_flat = rng.normal(size = (3, 1, 4))
    net = Network([dense(4, 5, Activation.TANH), dense(5, 3, Activation.RELU), dense(3, 2)], seed = seed)
    results.append(("dense", grad_check(net, regression(mse_loss, rng.normal(size = (3, 2))), x_flat, tolerance)))

    x_seq = rng.normal(size = (2, 5, 3))
    net = Network([conv1d(3, 4, 2), dense(4, 2)], seed = seed)
    results.append(("conv1d", grad_check(net, regression(mse_loss, rng.normal(size = (2, 2))), x_seq, tolerance)))

    for n_t in (2, 5):
        x = rng.normal(size = (2, n_t, 3))
        net = Network([lstm(3, 4), dense(4, 2)], seed = seed)
        results.append((f"lstm-{n_t}", grad_check(net, regression(mse_loss, rng.normal(size = (2, 2))), x, tolerance)))

    ids = rng.integers(0, 6, size = (2, 5, 1)).astype(np.float64)
    net = Network([embedding(6, 3), conv1d(3, 2, 3), dense(2, 2)], seed = seed)
    results.append(("embedding", grad_check(net, regression(mse_loss, rng.normal(size = (2, 2))), ids, tolerance)))

    net = Network([dense(4, 3, Activation.TANH), dense(3, 2)], seed = seed)
    results.append(("mse", grad_check(net, regression(mse_loss, rng.normal(size = (3, 2))), x_flat, tolerance)))

    huber = lambda p, t: huber_loss(p, t, 2.0)
    target_near = net.forward(x_flat) + rng.uniform(-0.5, 0.5, size = (3, 2))
    results.append(("huber-quadratic", grad_check(net, regression(huber, target_near), x_flat, tolerance)))
    target_far = net.forward(x_flat) + np.where(rng.random((3, 2)) < 0.5, -5.0, 5.0)
    results.append(("huber-linear", grad_check(net, regression(huber, target_far), x_flat, tolerance)))

    ids = rng.integers(1, 6, size = (5, 1)).astype(np.float64)
    net = Network([embedding(6, 3), lstm(3, 4), dense(4, 4, Activation.RELU), dense(4, 3), softmax(3)], seed = seed)
    ce = lambda probs: cross_entropy_loss(probs, 1, 0.7)
    results.append(("cross-entropy", grad_check(net, ce, ids, tolerance, logits_gradient = True)))
    return results
