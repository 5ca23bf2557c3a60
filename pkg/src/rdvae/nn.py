"""Small dense-network engine: forward, exact reverse-mode gradients, Adam.

Everything runs in float64 on numpy arrays. Inputs may be a single vector
``(in_dim,)`` or a batch ``(batch, in_dim)``; batches are processed with
matrix products rather than a per-sample loop.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("linear", "tanh", "relu", "softplus", "sigmoid")


class DivergenceError(FloatingPointError):
    """Raised when a forward pass, loss or gradient becomes non-finite."""


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    def __post_init__(self):
        if int(self.in_dim) < 1 or int(self.out_dim) < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "activation": self.activation}

    @classmethod
    def from_obj(cls, obj) -> "LayerSpec":
        if isinstance(obj, LayerSpec):
            return obj
        if isinstance(obj, dict):
            return cls(int(obj["in_dim"]), int(obj["out_dim"]), obj.get("activation", "linear"))
        in_dim, out_dim, *rest = obj
        return cls(int(in_dim), int(out_dim), rest[0] if rest else "linear")


def check_chain(specs: Sequence[LayerSpec]) -> list[LayerSpec]:
    specs = [LayerSpec.from_obj(s) for s in specs]
    if not specs:
        raise ValueError("at least one layer is required")
    for k in range(len(specs) - 1):
        if specs[k].out_dim != specs[k + 1].in_dim:
            raise ValueError(
                f"dimension chain broken between layer {k} (out={specs[k].out_dim}) "
                f"and layer {k + 1} (in={specs[k + 1].in_dim})"
            )
    return specs


def n_params(specs: Sequence[LayerSpec]) -> int:
    return sum(s.n_params for s in check_chain(specs))


@dataclass
class MlpParams:
    """Weights ``W[k]`` of shape (out, in) and biases ``b[k]`` of shape (out,)."""

    specs: list[LayerSpec]
    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        self.specs = check_chain(self.specs)
        if len(self.layers) != len(self.specs):
            raise ValueError("one (W, b) pair per layer spec is required")
        for spec, (W, b) in zip(self.specs, self.layers):
            if W.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise ValueError(
                    f"parameter shapes {W.shape}/{b.shape} do not match {spec}"
                )

    @property
    def size(self) -> int:
        return sum(s.n_params for s in self.specs)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    @classmethod
    def from_vector(cls, specs: Sequence[LayerSpec], vec: np.ndarray) -> "MlpParams":
        """Build params whose arrays are views into ``vec`` (no copy)."""
        specs = check_chain(specs)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != sum(s.n_params for s in specs):
            raise ValueError("flat vector length does not match layer specs")
        layers, pos = [], 0
        for s in specs:
            W = vec[pos:pos + s.in_dim * s.out_dim].reshape(s.out_dim, s.in_dim)
            pos += s.in_dim * s.out_dim
            b = vec[pos:pos + s.out_dim]
            pos += s.out_dim
            layers.append((W, b))
        return cls(specs, layers)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.specs), [(W.copy(), b.copy()) for W, b in self.layers])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(list(self.specs), [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.layers])


def init_params(specs: Sequence[LayerSpec], seed: int | np.random.Generator) -> MlpParams:
    """Glorot-uniform weights in +-sqrt(6/(in+out)), zero biases."""
    specs = check_chain(specs)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for s in specs:
        limit = np.sqrt(6.0 / (s.in_dim + s.out_dim))
        W = rng.uniform(-limit, limit, size=(s.out_dim, s.in_dim))
        layers.append((W, np.zeros(s.out_dim)))
    return MlpParams(specs, layers)


# --- activations -----------------------------------------------------------

def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "linear":
        return a
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "softplus":
        return softplus(a)
    if name == "sigmoid":
        return sigmoid(a)
    raise ValueError(name)


def _activation_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Derivative of the activation given pre-activation ``a`` and output ``h``."""
    if name == "linear":
        return np.ones_like(a)
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0).astype(np.float64)
    if name == "softplus":
        return sigmoid(a)
    if name == "sigmoid":
        return h * (1.0 - h)
    raise ValueError(name)


@dataclass
class ForwardCache:
    params_id: int
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def forward(params: MlpParams, x: np.ndarray, cache: bool = False):
    """Run the network on ``x``; returns ``out`` or ``(out, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.specs[0].in_dim:
        raise ValueError(
            f"input shape {x.shape} does not match first layer in_dim={params.specs[0].in_dim}"
        )
    fc = ForwardCache(id(params), squeeze=squeeze) if cache else None
    for spec, (W, b) in zip(params.specs, params.layers):
        a = h @ W.T + b
        out = _activate(spec.activation, a)
        if fc is not None:
            fc.inputs.append(h)
            fc.pre.append(a)
            fc.post.append(out)
        h = out
    if not np.all(np.isfinite(h)):
        raise DivergenceError("non-finite network output")
    result = h[0] if squeeze else h
    return (result, fc) if cache else result


def backward(params: MlpParams, cache: ForwardCache, grad_output: np.ndarray,
             grad_params: MlpParams | None = None):
    """Reverse pass. Gradients w.r.t. params are summed over the batch.

    If ``grad_params`` is given, gradients are accumulated into it in place.
    Returns ``(grad_params, grad_input)``.
    """
    if cache is None or cache.params_id != id(params) or len(cache.pre) != len(params.layers):
        raise ValueError("stale or mismatched forward cache")
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {cache.post[-1].shape}")
    if grad_params is None:
        grad_params = params.zeros_like()
    for k in range(len(params.layers) - 1, -1, -1):
        spec = params.specs[k]
        W, _ = params.layers[k]
        if spec.activation != "linear":
            g = g * _activation_grad(spec.activation, cache.pre[k], cache.post[k])
        gW, gb = grad_params.layers[k]
        gW += g.T @ cache.inputs[k]
        gb += g.sum(axis=0)
        g = g @ W
    grad_input = g[0] if cache.squeeze else g
    return grad_params, grad_input


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **hyper) -> "AdamState":
        return cls(0, np.zeros(size), np.zeros(size), **hyper)

    def to_dict(self) -> dict:
        return {
            "step": self.step, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps_hat": self.eps_hat, "first_moment": self.first_moment.tolist(),
            "second_moment": self.second_moment.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(int(d["step"]), np.asarray(d["first_moment"], dtype=np.float64),
                   np.asarray(d["second_moment"], dtype=np.float64),
                   float(d["lr"]), float(d["beta1"]), float(d["beta2"]), float(d["eps_hat"]))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update on flat arrays; returns new (state, params).

    Uses the epsilon-hat form: ``theta -= lr_t * m / (sqrt(v) + eps_hat)`` with
    ``lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.first_moment.shape:
        raise ValueError("Adam: parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient passed to Adam")
    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    lr_t = state.lr * np.sqrt(1.0 - state.beta2 ** t) / (1.0 - state.beta1 ** t)
    new_params = params - lr_t * m / (np.sqrt(v) + state.eps_hat)
    new_state = AdamState(t, m, v, state.lr, state.beta1, state.beta2, state.eps_hat)
    return new_state, new_params


# --- gradient oracle -------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DivergenceError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# --- checkpoints -----------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def params_to_dict(params: MlpParams) -> dict:
    return {
        "specs": [s.to_dict() for s in params.specs],
        "weights": [W.ravel().tolist() for W, _ in params.layers],
        "biases": [b.tolist() for _, b in params.layers],
    }


def params_from_dict(d: dict) -> MlpParams:
    specs = [LayerSpec.from_obj(s) for s in d["specs"]]
    layers = [
        (np.asarray(w, dtype=np.float64).reshape(s.out_dim, s.in_dim), np.asarray(b, dtype=np.float64))
        for s, w, b in zip(specs, d["weights"], d["biases"])
    ]
    return MlpParams(specs, layers)
