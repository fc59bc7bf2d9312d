"""SVD reparameterization of an adapter and its split into sub-LoRAs."""

import logging

import numpy as np
from numpy.typing import NDArray

from lorapack.errors import ConfigError, DegenerateSpectrumError, SvdConvergenceError
from lorapack.models import LoraAdapter, Matrix, SubLoraSplit, SvdFactors

logger = logging.getLogger(__name__)

JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 60

# Relative slack when comparing cumulative energy ratios against rho.
RATIO_SLACK = 1e-9


def _jacobi_svd(core: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """One-sided (Hestenes) Jacobi SVD of a small square matrix.

    Returns U, s, V with core = U @ diag(s) @ V.T; s is unsorted.
    """
    g = core.copy()
    r = g.shape[1]
    v = np.eye(r)

    for sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(r - 1):
            for q in range(p + 1, r):
                alpha = float(g[:, p] @ g[:, p])
                beta = float(g[:, q] @ g[:, q])
                gamma = float(g[:, p] @ g[:, q])
                if alpha == 0.0 or beta == 0.0:
                    continue
                coupling = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, coupling)
                if coupling <= JACOBI_TOLERANCE:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                gp, gq = g[:, p].copy(), g[:, q].copy()
                g[:, p] = c * gp - s * gq
                g[:, q] = s * gp + c * gq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if off <= JACOBI_TOLERANCE:
            logger.debug(f"Jacobi converged after {sweep + 1} sweep(s)")
            break
    else:
        raise SvdConvergenceError(
            f"Jacobi SVD did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )

    singular = np.linalg.norm(g, axis=0)
    u = np.zeros_like(g)
    tiny = singular.max(initial=0.0) * r * np.finfo(np.float64).eps
    live = singular > tiny
    u[:, live] = g[:, live] / singular[live]
    if not np.all(live):
        u = _complete_orthonormal(u, live)
    return u, singular, v


def _complete_orthonormal(u: NDArray[np.float64], live: NDArray[np.bool_]) -> NDArray[np.float64]:
    # Columns for (numerically) zero singular values are arbitrary; fill them
    # with unit vectors orthogonal to the columns already present.
    for i in np.flatnonzero(~live):
        basis = u[:, live]
        residual = np.eye(u.shape[0])
        for _ in range(2):
            residual -= basis @ (basis.T @ residual)
        norms = np.linalg.norm(residual, axis=0)
        best = int(np.argmax(norms))
        u[:, i] = residual[:, best] / norms[best]
        live = live.copy()
        live[i] = True
    return u


def economy_svd_of_product(adapter: LoraAdapter) -> SvdFactors:
    """Rank-r SVD of B @ A without forming the m x n product.

    Economy QR of B and of A.T compresses the product to an r x r core
    R_B @ R_A.T, which one-sided Jacobi decomposes. The largest-magnitude entry
    of every U column is made non-negative.

    Args:
        adapter: Valid adapter with r <= min(m, n)

    Returns:
        SvdFactors with singular values in descending order

    Raises:
        SvdConvergenceError: If Jacobi hits the sweep cap
    """
    b = adapter.B.astype(np.float64)
    a = adapter.A.astype(np.float64)
    q_b, r_b = np.linalg.qr(b)
    q_a, r_a = np.linalg.qr(a.T)

    u_core, singular, v_core = _jacobi_svd(r_b @ r_a.T)
    order = np.argsort(-singular, kind="stable")
    u = q_b @ u_core[:, order]
    v = q_a @ v_core[:, order]
    singular = singular[order]

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u *= signs
    v *= signs

    return SvdFactors(
        U=u.astype(np.float32),
        singular_values=singular.astype(np.float32),
        V=v.astype(np.float32),
    )


def reparameterize(svd: SvdFactors) -> tuple[Matrix, Matrix]:
    """B' = U diag(sqrt(s)), A' = diag(sqrt(s)) V^T."""
    root = np.sqrt(svd.singular_values.astype(np.float64))
    b_prime = svd.U.astype(np.float64) * root
    a_prime = (svd.V.astype(np.float64) * root).T
    return b_prime.astype(np.float32), np.ascontiguousarray(a_prime, dtype=np.float32)


def select_rank_h(singular_values: NDArray[np.floating], rho: float) -> int:
    """Smallest h whose top-h singular values cover a ``rho`` share of sum(s^2).

    Raises:
        ConfigError: If rho is outside (0, 1]
        DegenerateSpectrumError: If every singular value is zero
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    energy = np.square(np.asarray(singular_values, dtype=np.float64))
    total = energy.sum()
    if energy.size == 0 or total <= 0.0:
        raise DegenerateSpectrumError("All singular values are zero")
    ratios = np.cumsum(energy) / total
    h = int(np.argmax(ratios >= rho - RATIO_SLACK)) + 1
    return min(h, energy.size)


def split_at_rank(
    b_prime: Matrix, a_prime: Matrix, h: int, singular_values: NDArray[np.float32]
) -> SubLoraSplit:
    """Cut reparameterized factors after the first ``h`` components."""
    r = b_prime.shape[1]
    if not 0 <= h <= r:
        raise ConfigError(f"h={h} outside [0, {r}]")
    return SubLoraSplit(
        B_high=np.ascontiguousarray(b_prime[:, :h]),
        A_high=np.ascontiguousarray(a_prime[:h, :]),
        B_low=np.ascontiguousarray(b_prime[:, h:]),
        A_low=np.ascontiguousarray(a_prime[h:, :]),
        h=h,
        singular_values=singular_values,
    )


def split_subloras(adapter: LoraAdapter, rho: float) -> SubLoraSplit:
    """SVD-reparameterize ``adapter`` and split it with the variance-ratio rule.

    An all-zero adapter has no defined ratio; it is split at h = min(1, r).
    """
    svd = economy_svd_of_product(adapter)
    b_prime, a_prime = reparameterize(svd)
    try:
        h = select_rank_h(svd.singular_values, rho)
    except DegenerateSpectrumError:
        h = min(1, svd.rank)
        logger.warning(f"Layer {adapter.layer_name} is an all-zero adapter; using h={h}")
    return split_at_rank(b_prime, a_prime, h, svd.singular_values)


def split_static(adapter: LoraAdapter, h: int) -> SubLoraSplit:
    """SVD-reparameterize ``adapter`` and split it at a fixed h."""
    if not 0 <= h <= adapter.rank:
        raise ConfigError(f"h={h} exceeds the rank {adapter.rank} of {adapter.layer_name}")
    svd = economy_svd_of_product(adapter)
    b_prime, a_prime = reparameterize(svd)
    return split_at_rank(b_prime, a_prime, h, svd.singular_values)
