"""Dense feed-forward networks with an explicit reverse pass and Adam.

Batches are row-major: inputs have shape ``(batch, width)``. Layer ``l`` maps
``widths[l]`` to ``widths[l + 1]`` with a weight of shape
``(widths[l + 1], widths[l])``. Hidden layers share one activation; the final
layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("tanh", "softplus", "relu")


class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError(f"need at least 2 layer widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.layer_widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(self.n_layers)]


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.spec.shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ShapeError("number of layers does not match spec")
        for i, ((ws, bs), w, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if w.shape != ws or b.shape != bs:
                raise ShapeError(
                    f"layer {i}: expected W{ws} b{bs}, got W{w.shape} b{b.shape}"
                )

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, spec: MlpSpec, arrays: list[np.ndarray]) -> MlpParams:
        return cls(spec, [np.array(a, dtype=np.float64) for a in arrays[0::2]],
                   [np.array(a, dtype=np.float64) for a in arrays[1::2]])

    def copy(self) -> MlpParams:
        return MlpParams(self.spec, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> MlpParams:
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return MlpParams.from_arrays(self.spec, arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def equals(self, other: MlpParams) -> bool:
        """Bit-exact comparison of spec and every parameter."""
        return self.spec == other.spec and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


def init_scale(fan_in: int) -> float:
    """Half-width of the uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    return 1.0 / np.sqrt(fan_in)


def mlp_init(spec: MlpSpec, seed: int | np.random.Generator) -> MlpParams:
    """Fan-in scaled uniform weights, zero biases.

    Weight std for layer ``l`` is ``1 / sqrt(3 * widths[l])``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for (ws, bs) in spec.shapes():
        a = init_scale(ws[1])
        weights.append(rng.uniform(-a, a, size=ws))
        biases.append(np.zeros(bs))
    return MlpParams(spec, weights, biases)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return np.maximum(z, 0.0)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic, overflow-free
    return (z > 0.0).astype(np.float64)


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations from one forward call."""

    params_id: int
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    acts: list[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.in_width:
        raise ShapeError(f"expected input (batch, {params.spec.in_width}), got {x.shape}")
    cache = ForwardCache(params_id=id(params))
    act = params.spec.activation
    h = x
    last = params.spec.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        if i == last:
            h = z
        else:
            cache.preacts.append(z)
            h = _act(act, z)
            cache.acts.append(h)
    return h, cache


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_vjp(params: MlpParams, cache: ForwardCache,
            upstream: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gradients of ``sum(upstream * output)``.

    Returns the input gradient (per row) and parameter gradients summed over
    the batch, in the canonical order of ``MlpParams.arrays``.
    """
    if cache.params_id != id(params) or len(cache.inputs) != params.spec.n_layers:
        raise CacheError("cache was not produced by a forward call on these params")
    g = np.asarray(upstream, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, params.spec.out_width):
        raise ShapeError(f"upstream shape {g.shape} != ({batch}, {params.spec.out_width})")
    act = params.spec.activation
    grads: list[np.ndarray] = [None] * (2 * params.spec.n_layers)  # type: ignore[list-item]
    for i in range(params.spec.n_layers - 1, -1, -1):
        if i < params.spec.n_layers - 1:
            g = g * _act_grad(act, cache.preacts[i], cache.acts[i])
        grads[2 * i] = g.T @ cache.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i]
    return g, grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, **hyper) -> AdamState:
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)

    def copy(self) -> AdamState:
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: MlpParams, grads: list[np.ndarray],
              lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or len(state.m) != len(arrays):
        raise ShapeError("gradient/state list does not match parameters")
    for i, (g, a) in enumerate(zip(grads, arrays)):
        if g.shape != a.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, param has {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter array {i}; update rejected")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_m, new_v, new_a = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_a.append(a - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (MlpParams.from_arrays(params.spec, new_a),
            AdamState(new_m, new_v, t, b1, b2, state.eps))


def finite_diff_grad(f: Callable[[np.ndarray], float], params: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat parameter vector."""
    p = np.array(params, dtype=np.float64)
    flat = p.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(p)
        flat[i] = orig - step
        down = f(p)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(p.shape)
