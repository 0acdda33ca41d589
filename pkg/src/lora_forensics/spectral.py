"""Singular-value spectra of LoRA factors and their products.

Everything here works in float64 and exploits the rank-r structure of a LoRA
update: factor spectra come from an r x r Gram matrix, product spectra from
the r x r core left after thin QR of both factors. The d x k update itself
is never formed. Eigenvalues come from a Jacobi solver that rotates a whole
stack of small symmetric matrices at once, so one call can serve every layer
of a model.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonFiniteInput, NotSymmetric

SYMMETRY_TOL = 1e-12
OFFDIAG_TOL = 1e-12
MAX_SWEEPS = 100
DEFAULT_SIZE_CAP = 4096
ORACLE_MAX_ELEMENTS = 10**7
ORACLE_MAX_SWEEPS = 60


@lru_cache(maxsize=None)
def round_robin_pairs(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint (p, q) index pairs covering every p < q once, grouped in n-1 rounds (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if max(p, q) < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def check_finite(*arrays):
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise NonFiniteInput("input contains NaN or infinity")


@lru_cache(maxsize=None)
def _block_schedule(n: int) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Circle-method arrangements laid out so every round pairs position i with i + m/2.

    Returns the starting arrangement and, per round, the inverse of the
    permutation that moves round t's arrangement to round t + 1's. Odd n gets
    a dummy index n.
    """
    m = n + (n % 2)
    h = m // 2
    players = list(range(m))
    arrangements = []
    for _ in range(m - 1):
        arrangements.append(players[:h] + players[h:][::-1])
        players = [players[0], players[-1], *players[1:-1]]
    inverses = []
    for t in range(m - 1):
        pos = {p: i for i, p in enumerate(arrangements[t])}
        perm = np.array([pos[p] for p in arrangements[(t + 1) % (m - 1)]])
        inverses.append(np.argsort(perm))
    return np.array(arrangements[0]), tuple(inverses)


def _jacobi_eigen_stack(S: np.ndarray) -> np.ndarray:
    """Diagonalize a (b, n, n) stack of symmetric matrices; return the diagonals.

    Each round applies n/2 disjoint rotations and the move to the next
    round's pairing as one orthogonal Q, W <- Q^T W Q.
    """
    b, n, _ = S.shape
    if n == 1:
        return S[:, :, 0].copy()
    m = n + (n % 2)
    h = m // 2
    start, inverses = _block_schedule(n)
    work = np.zeros((b, m, m))
    work[:, :n, :n] = S
    work = work[:, start[:, None], start[None, :]]
    tol = OFFDIAG_TOL * np.linalg.norm(S, axis=(1, 2))
    offmask = ~np.eye(m, dtype=bool)
    lo, hi = np.arange(h), np.arange(h, m)
    # flat positions of Q's nonzeros per round: (lo, lo'), (hi, hi'), (lo, hi'), (hi, lo')
    slots = [np.concatenate([lo * m + inv[lo], hi * m + inv[hi], lo * m + inv[hi], hi * m + inv[lo]]) for inv in inverses]
    pending = np.arange(b)
    for sweep in range(MAX_SWEEPS + 1):
        off = np.abs(work[pending][:, offmask]).max(axis=1)
        pending = pending[(off >= tol[pending]) & (off > 0)]
        if not len(pending):
            break
        if sweep == MAX_SWEEPS:
            raise NoConvergence(f"Jacobi eigen-solver did not converge in {MAX_SWEEPS} sweeps")
        W = work[pending]
        row_tol = tol[pending][:, None]
        Q = np.zeros_like(W)
        flat_q = Q.reshape(len(W), m * m)
        prev = slots[0]
        WQ = np.empty_like(W)
        for j in range(m - 1):
            apq = W[:, lo, hi]
            active = (np.abs(apq) >= row_tol) & (apq != 0)
            tau = (W[:, hi, hi] - W[:, lo, lo]) / (2.0 * np.where(active, apq, 1.0))
            with np.errstate(over="ignore"):
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            flat_q[:, prev] = 0.0
            prev = slots[j]
            flat_q[:, prev] = np.concatenate([c, c, s, -s], axis=1)
            # (W Q)^T Q equals Q^T W Q for symmetric W
            np.matmul(W, Q, out=WQ)
            np.matmul(WQ.transpose(0, 2, 1), Q, out=W)
        work[pending] = W
    diag = np.diagonal(work, axis1=1, axis2=2)
    return diag[:, start < n] if m != n else diag.copy()


def symmetric_eigenvalues(S: np.ndarray, size_cap: int = DEFAULT_SIZE_CAP) -> np.ndarray:
    """Eigenvalues of a symmetric matrix (or a stack of them), descending.

    Cyclic Jacobi with a parallel (round-robin) pair ordering; converged when
    every off-diagonal entry is below 1e-12 times the Frobenius norm.
    """
    S = np.array(S, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise DimensionMismatch(f"expected square matrices, got shape {S.shape}")
    n = S.shape[-1]
    if n > size_cap:
        raise DimensionMismatch(f"matrix size {n} exceeds cap {size_cap}")
    check_finite(S)
    batch_shape = S.shape[:-2]
    stack = S.reshape((int(np.prod(batch_shape, dtype=np.int64)), n, n))
    if not n or not len(stack):
        return np.zeros(batch_shape + (n,))
    # exact power-of-two rescale to unit order; keeps tiny or huge inputs out of subnormal and overflow range
    _, exponent = np.frexp(np.abs(stack).max(axis=(1, 2)))
    stack = np.ldexp(stack, -exponent[:, None, None])
    asym = np.abs(stack - stack.transpose(0, 2, 1)).max(axis=(1, 2))
    if np.any(asym > SYMMETRY_TOL * np.linalg.norm(stack, axis=(1, 2))):
        raise NotSymmetric("matrix is not symmetric within 1e-12 relative")
    stack = 0.5 * (stack + stack.transpose(0, 2, 1))
    eig = np.ldexp(_jacobi_eigen_stack(stack), exponent[:, None])
    return -np.sort(-eig, axis=1).reshape(batch_shape + (n,))


def fit_length(values: np.ndarray, length: int | None) -> np.ndarray:
    if length is None or length == len(values):
        return values
    if length < len(values):
        return values[:length].copy()
    return np.concatenate([values, np.zeros(length - len(values))])


def gram(F: np.ndarray) -> np.ndarray:
    """Gram matrix on the smaller side of F, symmetrized."""
    G = F @ F.T if F.shape[0] <= F.shape[1] else F.T @ F
    return 0.5 * (G + G.T)


def spectra_from_grams(grams: Sequence[np.ndarray]) -> list[np.ndarray]:
    """sqrt of clamped Gram eigenvalues, descending. Same-size Grams share one Jacobi batch."""
    out: list[np.ndarray | None] = [None] * len(grams)
    by_size: dict[int, list[int]] = {}
    for i, G in enumerate(grams):
        by_size.setdefault(G.shape[0], []).append(i)
    for n, idx in by_size.items():
        eig = symmetric_eigenvalues(np.stack([grams[i] for i in idx])) if n else np.zeros((len(idx), 0))
        sv = np.sqrt(np.clip(eig, 0.0, None))
        for row, i in zip(sv, idx):
            out[i] = row
    return out


def factor_spectra(mats: Sequence[np.ndarray], ranks: Sequence[int | None] | None = None) -> list[np.ndarray]:
    """Batched factor_spectrum."""
    mats = [np.asarray(F, dtype=np.float64) for F in mats]
    for F in mats:
        if F.ndim != 2:
            raise DimensionMismatch(f"expected a matrix, got shape {F.shape}")
    check_finite(*mats)
    spectra = spectra_from_grams([gram(F) for F in mats])
    ranks = ranks if ranks is not None else [None] * len(mats)
    return [fit_length(s, r) for s, r in zip(spectra, ranks)]


def factor_spectrum(F: np.ndarray, rank: int | None = None) -> np.ndarray:
    """Singular values of F via the eigenvalues of its smaller Gram matrix.

    >>> factor_spectrum([[3.0, 0.0], [0.0, 2.0]])
    array([3., 2.])
    """
    return factor_spectra([F], [rank])[0]


def _check_pair(B: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B = np.asarray(B, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if B.ndim != 2 or A.ndim != 2 or B.shape[1] != A.shape[0]:
        raise DimensionMismatch(f"cannot chain B {B.shape} with A {A.shape}")
    check_finite(B, A)
    return B, A


def product_core(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Small matrix R_B @ R_A.T sharing its singular values with B @ A."""
    B, A = _check_pair(B, A)
    RB = np.linalg.qr(B, mode="r")
    RA = np.linalg.qr(A.T, mode="r")
    return RB @ RA.T


def product_spectra(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """Batched product_spectrum over (B, A) pairs."""
    cores = [product_core(B, A) for B, A in pairs]
    spectra = spectra_from_grams([gram(C) for C in cores])
    return [fit_length(s, np.shape(B)[1]) for s, (B, _) in zip(spectra, pairs)]


def product_spectrum(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Singular values of B @ A (length r) without forming the product."""
    return product_spectra([(B, A)])[0]


def frobenius_stat(B: np.ndarray, A: np.ndarray) -> float:
    """Sum of squared entries of B @ A, as trace((B^T B)(A A^T))."""
    B, A = _check_pair(B, A)
    return max(float(np.sum((B.T @ B) * (A @ A.T))), 0.0)


def jacobi_svd_oracle(M: np.ndarray) -> np.ndarray:
    """Dense one-sided (Hestenes) Jacobi SVD of an explicit matrix; values only.

    Reference implementation for tests. Accepts a single matrix or a stack of
    equally shaped matrices and returns min(m, n) values per matrix, descending.
    """
    M = np.array(M, dtype=np.float64)
    if M.ndim < 2:
        raise DimensionMismatch(f"expected a matrix, got shape {M.shape}")
    m, n = M.shape[-2:]
    if m * n > ORACLE_MAX_ELEMENTS:
        raise DimensionMismatch(f"{m}x{n} exceeds the oracle size limit")
    check_finite(M)
    batch_shape = M.shape[:-2]
    # rows of X are the columns being orthogonalized; keep the shorter side as the column count
    X = M.reshape(-1, m, n)
    X = np.ascontiguousarray(X if m < n else X.transpose(0, 2, 1))
    n, m = X.shape[1:]
    if not X.size:
        return np.zeros(batch_shape + (n,))
    _, exponent = np.frexp(np.abs(X).max(axis=(1, 2)))
    X = np.ldexp(X, -exponent[:, None, None])
    eps = np.finfo(np.float64).eps
    tol = m * eps
    # columns shorter than this are numerically zero and left alone
    negligible = (tol * np.linalg.norm(X, axis=(1, 2))) ** 2
    schedule = round_robin_pairs(n)
    pending = np.arange(len(X))
    for _ in range(ORACLE_MAX_SWEEPS):
        if not len(pending):
            break
        W = X[pending]
        floor = negligible[pending][:, None]
        norms = np.einsum("bjm,bjm->bj", W, W)
        rotated = np.zeros(len(W), dtype=bool)
        for P, Q in schedule:
            xp, xq = W[:, P, :], W[:, Q, :]
            alpha, beta = norms[:, P], norms[:, Q]
            gamma = np.einsum("bjm,bjm->bj", xp, xq)
            active = (np.minimum(alpha, beta) > floor) & (np.abs(gamma) > tol * np.sqrt(np.abs(alpha * beta)))
            if not active.any():
                continue
            rotated |= active.any(axis=1)
            zeta = (beta - alpha) / (2.0 * np.where(active, gamma, 1.0))
            with np.errstate(over="ignore"):
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(active, t, 0.0)
            norms[:, P] = alpha - t * gamma
            norms[:, Q] = beta + t * gamma
            c = (1.0 / np.sqrt(1.0 + t * t))[:, :, None]
            s = t[:, :, None] * c
            W[:, P, :] = c * xp - s * xq
            W[:, Q, :] = s * xp + c * xq
        X[pending] = W
        pending = pending[rotated]
    else:
        if len(pending):
            raise NoConvergence(f"one-sided Jacobi did not converge in {ORACLE_MAX_SWEEPS} sweeps")
    sv = np.ldexp(np.linalg.norm(X, axis=2), exponent[:, None])
    return -np.sort(-sv, axis=1).reshape(batch_shape + (n,))


def oracle_spectra(mats: Sequence[np.ndarray], chunk: int = 32) -> list[np.ndarray]:
    """jacobi_svd_oracle over matrices of mixed shapes.

    Matrices are sorted by shape and zero-padded into small stacks; zero rows
    and columns leave the singular values unchanged.
    """
    mats = [np.asarray(M, dtype=np.float64) for M in mats]
    mats = [M if M.shape[0] >= M.shape[1] else M.T for M in mats]
    order = sorted(range(len(mats)), key=lambda i: (mats[i].shape[1], mats[i].shape[0]))
    out: list[np.ndarray | None] = [None] * len(mats)
    for start in range(0, len(order), chunk):
        idx = order[start : start + chunk]
        m = max(mats[i].shape[0] for i in idx)
        n = max(mats[i].shape[1] for i in idx)
        stack = np.zeros((len(idx), m, n))
        for j, i in enumerate(idx):
            stack[j, : mats[i].shape[0], : mats[i].shape[1]] = mats[i]
        sv = jacobi_svd_oracle(stack)
        for j, i in enumerate(idx):
            out[i] = sv[j, : mats[i].shape[1]]
    return out
