"""Deterministic dense linear algebra substrate.

Everything downstream (adapter forwards, gradients, certificates) runs on
plain float64 numpy arrays.  This module owns the contract-checked matrix
operations, the numerically stable softmax, the two initializers, the
power-iteration spectral norm, and the reproducible RNG streams.

All functions are pure: arrays are treated as immutable values and results
are freshly allocated, so concurrent callers can share inputs freely.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

RNG_ALGORITHM = "philox4x64-10"

_MASK64 = (1 << 64) - 1


class NonConvergenceWarning(UserWarning):
    """Power iteration hit its iteration cap before the tolerance was met."""


@dataclass(frozen=True)
class RngState:
    """Value-semantics handle on a counter-based random stream.

    Wraps numpy's Philox generator (4x64 words, 10 rounds).  The same
    ``RngState`` always reproduces the same draw sequence, bit for bit,
    across runs and platforms.  Independent streams are derived with
    :meth:`split`, which hashes a purpose label into a child seed, so the
    draw order of one stream never disturbs another.
    """

    seed: int
    algorithm: str = field(default=RNG_ALGORITHM)

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if self.algorithm != RNG_ALGORITHM:
            raise ValueError(
                f"unsupported rng algorithm {self.algorithm!r}; "
                f"this build implements {RNG_ALGORITHM!r}"
            )

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array([self.seed, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str) -> "RngState":
        """Child state dedicated to ``label``, independent of the parent."""
        digest = hashlib.sha256(
            self.seed.to_bytes(8, "little") + label.encode("utf-8")
        ).digest()
        return RngState(int.from_bytes(digest[:8], "little"))


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate a dense 2-d float64 matrix with finite entries."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate a dense 1-d float64 vector with finite entries."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking.

    Raises ``ValueError`` naming both operand shapes on an inner-dimension
    mismatch, and rejects non-finite results so overflow never propagates
    silently.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: a has shape {a.shape}, b has shape {b.shape}"
        )
    out = a @ b
    if not np.isfinite(out).all():
        raise ValueError("matmul produced non-finite entries (overflow?)")
    return out


def softmax(v) -> np.ndarray:
    """Stable softmax of a vector, computed with max-subtraction.

    Output entries are positive and sum to 1 within 1e-12.  Shifting every
    logit by the same constant leaves the result unchanged.
    """
    v = as_vector(v, "softmax input")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax for a batch of logit vectors."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kaiming_init(rows: int, cols: int, rng: RngState) -> np.ndarray:
    """He-uniform initializer with fan-in = cols and gain 1.

    Entries are i.i.d. uniform on [-sqrt(6/cols), +sqrt(6/cols)], drawn
    row-major from the given stream, so the same ``RngState`` always
    yields the same matrix.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"kaiming_init needs positive dims, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / cols)
    gen = rng.generator()
    return gen.uniform(-bound, bound, size=(rows, cols))


def zero_init(rows: int, cols: int) -> np.ndarray:
    """All-zero matrix of the requested shape."""
    if rows < 1 or cols < 1:
        raise ValueError(f"zero_init needs positive dims, got ({rows}, {cols})")
    return np.zeros((rows, cols), dtype=np.float64)


def spectral_norm(m, tol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Largest singular value via power iteration on m^T m.

    The start vector is the normalized all-ones vector, which keeps the
    estimate deterministic without any random draws.  If that vector lands
    exactly in the nullspace of m^T m the iteration deterministically falls
    back to standard basis vectors e_1, e_2, ... until one escapes.
    Convergence is declared when successive sigma estimates differ by less
    than ``tol``; running out of iterations emits
    :class:`NonConvergenceWarning` and returns the last estimate.
    """
    m = as_matrix(m, "m")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    cols = m.shape[1]

    def _iterate(v0: np.ndarray) -> float | None:
        v = v0
        sigma = float(np.linalg.norm(m @ v))
        for _ in range(max_iters):
            w = m.T @ (m @ v)
            wn = float(np.linalg.norm(w))
            if wn == 0.0:
                # start vector annihilated by m^T m; caller retries
                return None if sigma == 0.0 else sigma
            v = w / wn
            new_sigma = float(np.linalg.norm(m @ v))
            if abs(new_sigma - sigma) < tol:
                return new_sigma
            sigma = new_sigma
        warnings.warn(
            f"spectral_norm did not converge within {max_iters} iterations; "
            f"last estimate {sigma!r}",
            NonConvergenceWarning,
        )
        return sigma

    ones = np.ones(cols) / np.sqrt(cols)
    result = _iterate(ones)
    if result is None:
        for j in range(cols):
            basis = np.zeros(cols)
            basis[j] = 1.0
            result = _iterate(basis)
            if result is not None:
                break
    return 0.0 if result is None else result


def operator_norm_bound_check(m, bound: float) -> bool:
    """True iff the spectral norm of ``m`` is at most ``bound`` + 1e-9."""
    if bound <= 0:
        raise ValueError(f"bound must be positive, got {bound}")
    return spectral_norm(m) <= bound + 1e-9
