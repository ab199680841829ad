"""Unit-sphere geometry, stable softmax helpers, deterministic RNG streams,
and the central finite-difference gradient oracle.

Everything here is a pure function over immutable inputs; tests and training
both run in float64 (float32 is a training-speed option handled upstream).
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

ZERO_NORM_EPS = 1e-12

_U64_MASK = 0xFFFFFFFFFFFFFFFF


class ZeroVectorError(ValueError):
    """A vector with (numerically) zero length where a direction is needed."""


class NonFiniteEvaluationError(ArithmeticError):
    """A function probe produced NaN or Inf."""


def as_float_array(x, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray and reject NaN/Inf entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def normalize_to_sphere(v) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.

    Raises ZeroVectorError when the norm is below ZERO_NORM_EPS.
    """
    v = as_float_array(v, "vector")
    n = float(np.linalg.norm(v))
    if n < ZERO_NORM_EPS:
        raise ZeroVectorError("cannot normalize a zero-length vector")
    return v / n


def normalize_rows(m) -> np.ndarray:
    """Normalize each row of a 2-D array to unit norm."""
    m = as_float_array(m, "matrix")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroVectorError("matrix has a zero-length row")
    return m / norms[:, None]


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    The clamp protects downstream geometry (acos etc.) from 1 + eps rounding.
    """
    a = as_float_array(a, "a")
    b = as_float_array(b, "b")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        raise ZeroVectorError("cosine similarity of a zero-length vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def stable_log_softmax(logits, axis: int = -1) -> np.ndarray:
    """Log-softmax computed with max subtraction; shift-invariant, no overflow."""
    z = as_float_array(logits, "logits")
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    """Softmax via stable_log_softmax."""
    return np.exp(stable_log_softmax(logits, axis=axis))


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-6
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    Args:
        f: scalar function of a flat float64 array; must be finite near x.
        x: evaluation point (flattened copy is probed coordinate by coordinate).
        h: step size, > 0.

    Returns:
        Array of the same shape as x with (f(x+h*e_i) - f(x-h*e_i)) / (2h).

    Raises:
        NonFiniteEvaluationError: if any probe returns NaN or Inf.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = as_float_array(x, "x")
    shape = x.shape
    flat = x.ravel().copy()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(flat.reshape(shape)))
        flat[i] = orig - h
        down = float(f(flat.reshape(shape)))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteEvaluationError(
                f"probe at coordinate {i} returned a non-finite value"
            )
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(shape)


def gradient_max_rel_error(hand, oracle) -> float:
    """Max absolute deviation scaled by the oracle gradient's infinity norm.

    Well-defined even when individual components are near zero; the usual
    metric for comparing a hand-derived gradient against finite differences.
    """
    hand = as_float_array(hand, "hand")
    oracle = as_float_array(oracle, "oracle")
    if hand.shape != oracle.shape:
        raise ValueError("gradient shapes differ")
    scale = max(float(np.max(np.abs(oracle), initial=0.0)), ZERO_NORM_EPS)
    return float(np.max(np.abs(hand - oracle), initial=0.0)) / scale


def _splitmix64(state: int) -> int:
    """One SplitMix64 output step (fixed, documented constants)."""
    state = (state + 0x9E3779B97F4A7C15) & _U64_MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64_MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64_MASK
    return z ^ (z >> 31)


def _token_u64(token) -> int:
    """Map a substream id (int or str) to a stable 64-bit value."""
    if isinstance(token, (int, np.integer)):
        return int(token) & _U64_MASK
    if isinstance(token, str):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"substream ids must be int or str, got {type(token)!r}")


class RngStream:
    """Deterministic random stream keyed by a 64-bit seed.

    Draws come from numpy's Philox counter-based generator keyed directly by
    the seed, so identical seeds give identical sequences on every platform.
    Substreams are derived by folding ids into the seed with SplitMix64,
    which keeps every consumer (data generation, augmentation, sampling)
    independent and reproducible from the one master seed.
    """

    ALGORITHM = "philox4x64 keyed by splitmix64(seed ^ id) chaining"

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK

    def substream(self, *ids) -> "RngStream":
        """Derive an independent child stream from (seed, *ids)."""
        state = self.seed
        for token in ids:
            state = _splitmix64(state ^ _token_u64(token))
        return RngStream(state)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator for this stream; every call restarts it."""
        return np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self) -> str:
        return f"RngStream(seed=0x{self.seed:016x})"
