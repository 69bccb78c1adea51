"""Dense matrix helpers: norms, power iteration, row softmax and the norm lemmas.

Arrays are plain float64 numpy arrays. Every routine here is a pure function.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_SEED = 0x5EED_0F_5EC7
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 10_000
LEMMA_SLACK = 1e-10
SQUARING_MIN_DIM = 256


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


class DegeneratePairError(ValueError):
    """Raised when a rate of change is requested for coincident inputs."""


class NormKind(enum.Enum):
    FROBENIUS = "frobenius"
    SPECTRAL = "spectral"
    INF_VECTOR = "inf"
    EUCLIDEAN = "euclidean"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    # scale first so huge/tiny entries do not over- or underflow
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        return 0.0
    return scale * math.sqrt(float(np.sum((a / scale) ** 2)))


def norm(a: np.ndarray, kind: NormKind) -> float:
    a = np.asarray(a, dtype=np.float64)
    if kind is NormKind.FROBENIUS or kind is NormKind.EUCLIDEAN:
        return frobenius_norm(a)
    if kind is NormKind.INF_VECTOR:
        return float(np.max(np.abs(a))) if a.size else 0.0
    return spectral_norm(a)


@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    iterations: int
    converged: bool


def _start_vector(dim: int, shape: tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *shape]))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def power_iteration(
    a: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = DEFAULT_SEED,
) -> PowerIterationResult:
    """Estimate the largest singular value of ``a`` by power iteration on its Gram matrix.

    The Gram matrix is formed on the smaller side (``aᵀa`` or ``aaᵀ``), so the
    estimate for ``a`` and ``aᵀ`` comes from the same operator. The eigenvalue
    estimate is the Rayleigh quotient, which approaches ``σ_max²`` from below.
    For Gram matrices of order ``SQUARING_MIN_DIM`` and above the iterate is
    advanced by the (rescaled) fourth power of the Gram matrix, which costs two
    dense products up front and then needs a quarter of the iterations.

    Convergence is declared when the *predicted* remaining error, extrapolated
    from the geometric decay of successive differences, drops below
    ``tol * estimate``. A plain successive-difference test stops too early
    when the two leading singular values are close.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"spectral norm needs a matrix, got shape {a.shape}")
    if a.size == 0 or not np.any(a):
        return PowerIterationResult(0.0, 0, True)

    m, n = a.shape
    gram = a.T @ a if n <= m else a @ a.T
    v = _start_vector(gram.shape[0], (min(m, n), max(m, n)), seed)
    step = gram
    if gram.shape[0] >= SQUARING_MIN_DIM:
        # iterate with (aᵀa)⁴: four power steps per matvec for two extra products
        for _ in range(2):
            step = step @ step
            step /= np.max(np.abs(step))

    lam = 0.0
    prev_diff = math.inf
    for it in range(1, max_iters + 1):
        # Rayleigh quotient of the current (unit) iterate
        new_lam = float(v @ (gram @ v))
        w = step @ v
        w_norm = float(np.linalg.norm(w))
        if w_norm == 0.0:
            # start vector landed in the null space; restart deterministically
            v = _start_vector(gram.shape[0], (it, m, n), seed)
            continue
        v = w / w_norm
        diff = abs(new_lam - lam)
        lam = new_lam
        ratio = diff / prev_diff if 0 < prev_diff < math.inf else 0.0
        prev_diff = diff
        if diff <= 16.0 * np.finfo(np.float64).eps * lam:
            # rounding floor: the ratio of successive differences is noise here
            return PowerIterationResult(math.sqrt(max(lam, 0.0)), it, True)
        if ratio >= 1.0 or it == 1:
            continue
        remaining = diff * ratio / (1.0 - ratio)
        if max(diff, remaining) <= tol * lam:
            return PowerIterationResult(math.sqrt(max(lam, 0.0)), it, True)
    return PowerIterationResult(math.sqrt(max(lam, 0.0)), max_iters, False)


def spectral_norm(
    a: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = DEFAULT_SEED,
) -> float:
    return power_iteration(a, tol=tol, max_iters=max_iters, seed=seed).value


def product_spectral_norm(left: np.ndarray, right: np.ndarray, **kwargs) -> float:
    """Spectral norm of ``left @ right`` without forming the product.

    With thin QR factors ``leftᵀ = Q₁R₁`` and ``right = Q₂R₂`` the product is
    ``R₁ᵀ Q₁ᵀ Q₂ R₂`` up to orthogonal factors on either side, which is small
    when the inner dimension is small (attention heads).
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape[1] != right.shape[0]:
        raise DimensionError(f"cannot multiply {left.shape} by {right.shape}")
    inner = left.shape[1]
    if inner >= min(left.shape[0], right.shape[1]):
        return spectral_norm(left @ right, **kwargs)
    _, r1 = np.linalg.qr(left)
    _, r2 = np.linalg.qr(right.T)
    return spectral_norm(r1 @ r2.T, **kwargs)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass(frozen=True)
class NormLemmaVerdict:
    frobenius_submultiplicative: bool
    spectral_left: bool
    spectral_right: bool

    def all(self) -> bool:
        return self.frobenius_submultiplicative and self.spectral_left and self.spectral_right


def check_norm_lemma(a: np.ndarray, b: np.ndarray, slack: float = LEMMA_SLACK) -> NormLemmaVerdict:
    """Check ‖ab‖_F against the three Frobenius/spectral product bounds."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = matmul(a, b)
    lhs = frobenius_norm(ab)
    fa, fb = frobenius_norm(a), frobenius_norm(b)
    sa, sb = spectral_norm(a), spectral_norm(b)

    def holds(rhs: float) -> bool:
        return lhs <= rhs * (1.0 + slack) + 1e-300

    return NormLemmaVerdict(holds(fa * fb), holds(sa * fb), holds(fa * sb))


def softmax_lipschitz_witness(u: np.ndarray, v: np.ndarray) -> float:
    """Return ‖softmax(u) − softmax(v)‖ / ‖u − v‖ (at most 1/2 in theory)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"{u.shape} vs {v.shape}")
    gap = float(np.linalg.norm(u - v))
    if gap == 0.0:
        raise DegeneratePairError("u and v coincide")
    return float(np.linalg.norm(softmax_rows(u) - softmax_rows(v))) / gap
