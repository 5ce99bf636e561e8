"""Feed-forward encoder with hand-written backprop, AdamW and a cosine schedule.

Layout: ``depth`` blocks of affine -> ReLU -> inverted dropout, then a final
affine map to the embedding. Weights are stored ``(fan_out, fan_in)`` and a
layer computes ``a @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .rng import Rng


@dataclass(frozen=True)
class EncoderConfig:
    f_in: int
    hidden_width: int
    depth: int
    f_out: int
    dropout_p: float = 0.0

    def __post_init__(self):
        if min(self.f_in, self.hidden_width, self.depth, self.f_out) < 1:
            raise ValueError(f"invalid encoder shape: {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.f_in] + [self.hidden_width] * self.depth + [self.f_out]


@dataclass
class EncoderParams:
    """Weights and biases per layer. Also used to carry gradients."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_p: float = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def f_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def f_out(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.dropout_p)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams([np.zeros_like(w) for w in self.weights],
                             [np.zeros_like(b) for b in self.biases], self.dropout_p)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_dict(self) -> dict:
        return {
            "dropout_p": self.dropout_p,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        ws = [np.array(w, dtype=np.float64).reshape(len(w), -1) for w in d["weights"]]
        bs = [np.array(b, dtype=np.float64) for b in d["biases"]]
        return cls(ws, bs, float(d["dropout_p"]))


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]  # input to each affine layer
    pre: list[np.ndarray]  # pre-activation of each hidden layer
    masks: list[np.ndarray | None]  # scaled dropout mask per hidden layer


def _init_layers(sizes: list[int], rng: Rng, dropout_p: float) -> EncoderParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases, dropout_p)


def init_encoder(cfg: EncoderConfig, rng: Rng) -> EncoderParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    return _init_layers(cfg.layer_sizes, rng, cfg.dropout_p)


def init_linear(f_in: int, n_out: int, rng: Rng) -> EncoderParams:
    """A single affine layer; forward/backward treat it like a depth-0 encoder."""
    return _init_layers([f_in, n_out], rng, 0.0)


def forward(params: EncoderParams, X: np.ndarray, train_mode: bool = False, rng: Rng | None = None,
            masks: list[np.ndarray | None] | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Embed a batch.

    In train mode with ``dropout_p > 0`` fresh masks are drawn from ``rng``
    unless ``masks`` replays those of an earlier trace.
    """
    a = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite encoder input")
    p = params.dropout_p
    trace = ForwardTrace([], [], [])
    n_hidden = params.n_layers - 1
    for l in range(n_hidden):
        trace.inputs.append(a)
        h = a @ params.weights[l].T + params.biases[l]
        trace.pre.append(h)
        a = np.maximum(h, 0.0)
        mask = None
        if train_mode and p > 0.0:
            if masks is not None:
                mask = masks[l]
            else:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                mask = (rng.random(h.shape) >= p) / (1.0 - p)
            a = a * mask
        trace.masks.append(mask)
    trace.inputs.append(a)
    Z = a @ params.weights[-1].T + params.biases[-1]
    return Z, trace


def embed(params: EncoderParams, X: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Eval-mode forward pass, chunked over rows."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return np.zeros((0, params.f_out))
    return np.concatenate([forward(params, X[i:i + chunk])[0] for i in range(0, len(X), chunk)])


def backward(params: EncoderParams, trace: ForwardTrace, dZ: np.ndarray) -> EncoderParams:
    dZ = np.asarray(dZ, dtype=np.float64)
    if dZ.shape != (trace.inputs[-1].shape[0], params.f_out):
        raise ValueError(f"gradient shape {dZ.shape} does not match forward output")
    grads = params.zeros_like()
    delta = dZ
    for l in range(params.n_layers - 1, -1, -1):
        grads.weights[l] = delta.T @ trace.inputs[l]
        grads.biases[l] = delta.sum(axis=0)
        if l == 0:
            break
        delta = delta @ params.weights[l]
        mask = trace.masks[l - 1]
        if mask is not None:
            delta = delta * mask
        delta = delta * (trace.pre[l - 1] > 0.0)
    return grads


def cosine_lr(lr0: float, t: int, T: int) -> float:
    """Half-cosine decay from ``lr0`` at t=0 to 0 at t=T."""
    if T <= 0:
        return lr0
    t = min(max(t, 0), T)
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * t / T)))


@dataclass
class OptimState:
    lr0: float
    total_steps: int
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: EncoderParams, lr0: float, total_steps: int, weight_decay: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "OptimState":
        zeros = [np.zeros_like(a) for a in params.arrays()]
        return cls(lr0, total_steps, weight_decay, beta1, beta2, eps, 0,
                   zeros, [z.copy() for z in zeros])


def adamw_step(state: OptimState, params: EncoderParams, grads: EncoderParams) -> None:
    """One AdamW update in place. Weight decay is decoupled from the moment estimates."""
    lr = cosine_lr(state.lr0, state.t, state.total_steps)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(B), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B
