"""Float64 numeric substrate shared by the encoder, projector, and LM.

Everything downstream is built from a handful of primitives defined here:
parameters with explicit gradient accumulators and a freeze flag, stable
softmax variants, linear and layer-norm layers with hand-derived backward
passes, and a central finite-difference checker that independently audits
every analytic gradient in the package. Internal precision is float64 so the
finite-difference checks stay sharp; checkpoints downcast on save.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Contract violation in a numeric primitive (shape, emptiness, NaN)."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams everywhere."""
    return np.random.default_rng(seed)


@dataclass
class Parameter:
    """A named weight array with its gradient accumulator and a freeze flag.

    When ``trainable`` is False the gradient buffer stays zero: all
    accumulation paths go through :meth:`accumulate`, and the optimizer skips
    frozen parameters entirely.
    """

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray) -> None:
        if self.trainable:
            self.grad += g

    def accumulate_rows(self, rows: slice | np.ndarray, g: np.ndarray) -> None:
        if self.trainable:
            self.grad[rows] += g

    def fingerprint(self) -> str:
        """SHA-256 over shape and raw bytes; used to assert freezing contracts."""
        h = hashlib.sha256()
        h.update(str(self.value.shape).encode())
        h.update(self.value.tobytes())
        return h.hexdigest()


def fingerprint_params(params: Iterable[Parameter]) -> dict[str, str]:
    return {p.name: p.fingerprint() for p in params}


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax: max-subtracted, sums to one, preserves the argmax."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise NumericsError("empty distribution")
    if not np.all(np.isfinite(v)):
        raise NumericsError("non-finite input to softmax")
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v: np.ndarray) -> np.ndarray:
    """log(softmax(v)) computed without forming the softmax; all outputs <= 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise NumericsError("empty distribution")
    if not np.all(np.isfinite(v)):
        raise NumericsError("non-finite input to log_softmax")
    shifted = v - v.max()
    return shifted - math.log(np.exp(shifted).sum())


def linear_forward(x: np.ndarray, weight: Parameter, bias: Parameter | None = None) -> np.ndarray:
    """x @ W + b with b broadcast over rows."""
    if x.shape[-1] != weight.value.shape[0]:
        raise NumericsError(
            f"linear shape mismatch: input {x.shape} vs weight {weight.value.shape}"
        )
    y = x @ weight.value
    if bias is not None:
        y = y + bias.value
    return y


def linear_backward(
    dout: np.ndarray,
    x: np.ndarray,
    weight: Parameter,
    bias: Parameter | None = None,
) -> np.ndarray:
    """Chain rule for ``linear_forward``: accumulates W/b grads, returns dx."""
    if dout.shape[-1] != weight.value.shape[1]:
        raise NumericsError(
            f"linear backward shape mismatch: upstream {dout.shape} vs weight {weight.value.shape}"
        )
    d2 = dout.reshape(-1, dout.shape[-1])
    if weight.trainable:
        x2 = x.reshape(-1, x.shape[-1])
        weight.accumulate(x2.T @ d2)
    if bias is not None and bias.trainable:
        bias.accumulate(d2.sum(axis=0))
    return dout @ weight.value.T


def layernorm_forward(
    x: np.ndarray, gain: Parameter, bias: Parameter, eps: float = 1e-5
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Row-wise layer norm; returns the output and a cache for the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain.value + bias.value, (xhat, inv)


def layernorm_backward(
    dout: np.ndarray,
    cache: tuple[np.ndarray, np.ndarray],
    gain: Parameter,
    bias: Parameter,
) -> np.ndarray:
    xhat, inv = cache
    d2 = dout.reshape(-1, dout.shape[-1])
    x2 = xhat.reshape(-1, xhat.shape[-1])
    if gain.trainable:
        gain.accumulate((d2 * x2).sum(axis=0))
    if bias.trainable:
        bias.accumulate(d2.sum(axis=0))
    dxhat = dout * gain.value
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form gaussian error linear unit."""
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    "gelu": (gelu, gelu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "identity": (lambda x: x, np.ones_like),
}


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def clip_global_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def finite_diff_check(
    f: Callable[[], float],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_coords_per_param: int = 256,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare stored analytic gradients against central finite differences.

    ``f`` must be a deterministic scalar function of the parameter values and
    must not itself mutate parameters or gradients. The analytic gradient of
    ``f`` is expected to already sit in each ``param.grad``. Coordinates are
    subsampled (at most ``max_coords_per_param`` per parameter) and the
    returned value is the worst relative error
    ``|analytic - central| / max(1, |central|)`` over all sampled coordinates.
    """
    if eps <= 0:
        raise NumericsError("eps must be positive")
    rng = rng if rng is not None else make_rng(0)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        if flat.size <= max_coords_per_param:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericsError("objective became non-finite during finite differences")
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
