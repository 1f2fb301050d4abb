"""Dense float64 linear algebra, activations, seeded sampling and a
finite-difference gradient oracle.

A *FeatureMatrix* is a 2-D ``numpy.ndarray`` of dtype float64 whose rows are
instances.  Functions here never mutate their inputs.

Matrix products go through :func:`matmul`.  While the process-wide
deterministic flag is on (the default) the product is computed by
``numpy.einsum`` without BLAS dispatch, so the reduction order is fixed and
results do not depend on thread count.  Turning the flag off uses
``numpy.matmul`` and whatever parallelism the BLAS build provides.
"""

from __future__ import annotations

import contextlib
import logging
import zlib
from collections.abc import Callable, Iterator
from typing import TypeAlias

import numpy as np
import numpy.typing as npt

from crossgrain import settings
from crossgrain.errors import EvaluationError, NumericError, PreconditionError, ShapeError

logger = logging.getLogger(__name__)

FeatureMatrix: TypeAlias = npt.NDArray[np.float64]
Vector: TypeAlias = npt.NDArray[np.float64]

_deterministic = settings.DETERMINISTIC


# ---------------------------------------------------------------------------
# Deterministic mode
# ---------------------------------------------------------------------------

def set_deterministic(flag: bool) -> None:
    """Select the sequential (True) or BLAS (False) matrix product."""
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


@contextlib.contextmanager
def deterministic_mode(flag: bool) -> Iterator[None]:
    """Temporarily switch the matrix-product mode."""
    previous = _deterministic
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(previous)


# ---------------------------------------------------------------------------
# Construction and checks
# ---------------------------------------------------------------------------

def as_matrix(values: npt.ArrayLike, *, name: str = "matrix") -> FeatureMatrix:
    """Return *values* as a finite 2-D float64 array (1-D input becomes one row)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}", arr.shape)
    ensure_finite(arr, name=name)
    return arr


def ensure_finite(arr: npt.NDArray[np.float64], *, name: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or infinite entries")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: FeatureMatrix, b: FeatureMatrix) -> FeatureMatrix:
    """C[i, j] = sum_k A[i, k] * B[k, j]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply shape {a.shape} by shape {b.shape}", a.shape, b.shape
        )
    if _deterministic:
        out = np.einsum("ik,kj->ij", a, b)
    else:
        out = np.matmul(a, b)
    return out


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def sigmoid(x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Elementwise logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Row-wise softmax (each row sums to one)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def relu(x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


# ---------------------------------------------------------------------------
# Seeded sampling
# ---------------------------------------------------------------------------

class SeededRng:
    """Reproducible random stream backed by the Philox counter-based generator.

    Two instances built from the same seed (and the same stream name) yield
    identical samples on every platform.  ``child(name)`` derives an
    independent stream keyed by *name*, so phases can draw without disturbing
    each other's sequences.
    """

    def __init__(self, seed: int, *, _spawn_key: tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self._spawn_key = _spawn_key
        sequence = np.random.SeedSequence(self.seed, spawn_key=_spawn_key)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, name: str) -> SeededRng:
        key = zlib.crc32(name.encode("utf-8"))
        return SeededRng(self.seed, _spawn_key=(*self._spawn_key, key))

    # Thin wrappers so call sites never reach for the global numpy RNG.

    def uniform(self, low: float = 0.0, high: float = 1.0, size: int | tuple[int, ...] | None = None) -> npt.NDArray[np.float64]:
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: int | tuple[int, ...] | None = None) -> npt.NDArray[np.float64]:
        return self.generator.normal(loc, scale, size)

    def bernoulli(self, probs: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        return (self.generator.random(probs.shape) < probs).astype(np.float64)

    def multinomial(self, counts: npt.NDArray[np.int64], probs: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        return self.generator.multinomial(counts, probs).astype(np.float64)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self._spawn_key})"


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[Vector], float],
    x: npt.ArrayLike,
    h: float = settings.FINITE_DIFF_STEP,
) -> Vector:
    """Central-difference gradient of scalar *f* at *x*.

    Each coordinate is ``(f(x + h e_i) - f(x - h e_i)) / (2h)``.

    Raises:
        PreconditionError: if ``h <= 0``.
        EvaluationError: if *f* returns a non-finite value.
    """
    if not h > 0:
        raise PreconditionError(f"finite-difference step must be positive, got {h}")
    base = np.array(x, dtype=np.float64).ravel()
    grad = np.zeros_like(base)
    for i in range(base.size):
        shifted = base.copy()
        shifted[i] = base[i] + h
        upper = float(f(shifted))
        shifted[i] = base[i] - h
        lower = float(f(shifted))
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise EvaluationError(f"function value is not finite near coordinate {i}")
        grad[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """``||a - b|| / max(||a|| + ||b||, tiny)``, the usual gradient-check measure."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom
