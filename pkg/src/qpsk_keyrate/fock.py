"""Truncated Fock-space operators for a single bosonic mode.

All operators live on the span of |0>, ..., |n_cutoff>, so matrices are
(n_cutoff + 1) x (n_cutoff + 1). Quadratures follow [q, p] = i, i.e. the
vacuum has variance 1/2 in either quadrature.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import erfc, gammaln

HERMITIAN_TOL = 1e-12
SQRT_NEG_TOL = 1e-9
INTERVAL_EIG_TOL = 1e-10


def check_cutoff(n_cutoff: int) -> int:
    if int(n_cutoff) != n_cutoff or n_cutoff < 1:
        raise ValueError(f"photon-number cutoff must be an integer >= 1, got {n_cutoff!r}")
    return int(n_cutoff)


def check_hermitian(m, tol: float = HERMITIAN_TOL, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a complex array, raising if it is not Hermitian within ``tol``."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    err = float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0
    if err > tol:
        raise ValueError(f"{name} is not Hermitian: max |M - M^H| = {err:.3e}")
    return m


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.conj().T)


def annihilation_op(n_cutoff: int) -> np.ndarray:
    dim = check_cutoff(n_cutoff) + 1
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1).astype(complex)


class Quadratures(NamedTuple):
    q: np.ndarray
    p: np.ndarray
    n: np.ndarray
    d: np.ndarray


def quadrature_ops(n_cutoff: int) -> Quadratures:
    """Position, momentum, number and ``a^2 + a^dag^2`` on the truncated space."""
    a = annihilation_op(n_cutoff)
    ad = a.conj().T
    q = (a + ad) / np.sqrt(2.0)
    p = 1j * (ad - a) / np.sqrt(2.0)
    n = ad @ a
    d = a @ a + ad @ ad
    return Quadratures(q, p, n, d)


def coherent_ket(alpha: complex, n_cutoff: int) -> np.ndarray:
    """Fock amplitudes of |alpha>, cut at ``n_cutoff`` and deliberately not renormalized."""
    alpha = complex(alpha)
    if not np.isfinite(alpha):
        raise ValueError("coherent amplitude must be finite")
    k = np.arange(check_cutoff(n_cutoff) + 1)
    if alpha == 0:
        ket = np.zeros(k.size, dtype=complex)
        ket[0] = 1.0
        return ket
    # log-space keeps alpha**n / sqrt(n!) stable for large n
    log_mag = k * np.log(abs(alpha)) - 0.5 * gammaln(k + 1) - 0.5 * abs(alpha) ** 2
    return np.exp(log_mag) * np.exp(1j * k * np.angle(alpha))


def coherent_overlap(alpha: complex, beta: complex) -> complex:
    """Exact <alpha|beta> of the untruncated coherent states."""
    alpha, beta = complex(alpha), complex(beta)
    return complex(np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * abs(beta) ** 2 + np.conj(alpha) * beta))


def hermite_functions(y: float, n_max: int) -> np.ndarray:
    """Normalized harmonic-oscillator eigenfunctions psi_0..psi_{n_max} at ``y``."""
    psi = np.zeros(n_max + 1)
    psi[0] = np.pi ** -0.25 * np.exp(-0.5 * y * y)
    if n_max >= 1:
        psi[1] = np.sqrt(2.0) * y * psi[0]
    for n in range(1, n_max):
        psi[n + 1] = np.sqrt(2.0 / (n + 1)) * y * psi[n] - np.sqrt(n / (n + 1)) * psi[n - 1]
    return psi


def _upper_tail_elements(delta: float, n_cutoff: int) -> np.ndarray:
    """Matrix of integrals int_delta^inf psi_m psi_n dy for m, n <= n_cutoff.

    Off-diagonal entries follow from the Wronskian identity
    psi_m psi_n'' - psi_n psi_m'' = 2 (m - n) psi_m psi_n; the diagonal is
    built up from erfc(delta) / 2 by integrating d(psi_{n-1} psi_n)/dy.
    """
    top = n_cutoff + 2
    psi = hermite_functions(delta, top + 1)
    k = np.arange(top + 1)
    # psi_n' = sqrt(n/2) psi_{n-1} - sqrt((n+1)/2) psi_{n+1}
    dpsi = np.zeros(top + 1)
    dpsi[1:] += np.sqrt(k[1:] / 2.0) * psi[:top]
    dpsi -= np.sqrt((k + 1) / 2.0) * psi[1:]

    pv = psi[: top + 1]
    diff = np.subtract.outer(k, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        J = (np.outer(dpsi, pv) - np.outer(pv, dpsi)) / (2.0 * diff)
    J[diff == 0] = 0.0

    J[0, 0] = 0.5 * erfc(delta)
    for n in range(1, n_cutoff + 1):
        acc = psi[n - 1] * psi[n] - np.sqrt((n + 1) / 2.0) * J[n - 1, n + 1]
        if n >= 2:
            acc += np.sqrt((n - 1) / 2.0) * J[n - 2, n]
        J[n, n] = J[n - 1, n - 1] + acc / np.sqrt(n / 2.0)
    dim = n_cutoff + 1
    return J[:dim, :dim]


def interval_op(quadrature: str, bit: int, delta: float, n_cutoff: int) -> np.ndarray:
    """Projector-like operator onto quadrature outcomes mapped to ``bit``.

    bit 0 collects outcomes above ``delta``, bit 1 those below ``-delta``.
    The p-quadrature version is the q one conjugated by exp(i pi n / 2).
    """
    if quadrature not in ("q", "p"):
        raise ValueError(f"quadrature must be 'q' or 'p', got {quadrature!r}")
    if bit not in (0, 1):
        raise ValueError(f"bit must be 0 or 1, got {bit!r}")
    if not delta >= 0:
        raise ValueError(f"post-selection threshold must be >= 0, got {delta!r}")
    n_cutoff = check_cutoff(n_cutoff)

    J = _upper_tail_elements(float(delta), n_cutoff)
    k = np.arange(n_cutoff + 1)
    if bit == 1:
        J = J * (-1.0) ** np.add.outer(k, k)
    op = J.astype(complex)
    if quadrature == "p":
        # exact powers of i, avoiding complex pow round-off
        op = op * np.array([1, 1j, -1, -1j])[np.subtract.outer(k, k) % 4]
    op = hermitian_part(op)

    evals = np.linalg.eigvalsh(op)
    excess = max(-evals[0], evals[-1] - 1.0, 0.0)
    if excess > INTERVAL_EIG_TOL:
        raise ArithmeticError(
            f"interval operator spectrum leaves [0, 1] by {excess:.3e} "
            f"(delta={delta}, n_cutoff={n_cutoff}); tolerance {INTERVAL_EIG_TOL:.0e}"
        )
    return op


def op_sqrt(m) -> np.ndarray:
    """PSD square root; eigenvalues down to -1e-9 are treated as round-off and clamped."""
    m = check_hermitian(m, tol=1e-10)
    evals, evecs = np.linalg.eigh(hermitian_part(m))
    if evals.size and evals[0] < -SQRT_NEG_TOL:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {evals[0]:.3e})")
    root = np.sqrt(np.clip(evals, 0.0, None))
    return hermitian_part((evecs * root) @ evecs.conj().T)
