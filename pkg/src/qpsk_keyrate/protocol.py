"""QPSK constellation, the constraint set on rho_AB, and the key-map channels.

Tensor ordering is R (key register, 2) x A (Alice's label, 4) x B (Bob's
truncated mode, n_cutoff + 1) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fock import (
    check_cutoff,
    check_hermitian,
    coherent_overlap,
    hermitian_part,
    interval_op,
    op_sqrt,
    quadrature_ops,
)

LABELS = ("00", "10", "11", "01")
PHASES = tuple(np.pi / 4 * k for k in (1, 3, 5, 7))
N_LABELS = 4
MOMENTS = ("q", "p", "n", "d")


@dataclass(frozen=True)
class Constellation:
    amplitude: float
    phases: tuple = PHASES
    labels: tuple = LABELS
    probabilities: tuple = (0.25, 0.25, 0.25, 0.25)

    @property
    def states(self) -> np.ndarray:
        """Complex coherent amplitudes, one per label, in label order."""
        return self.amplitude * np.exp(1j * np.asarray(self.phases))


def build_constellation(alpha: float) -> Constellation:
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError(f"amplitude must be a positive real number, got {alpha!r}")
    return Constellation(float(alpha))


def alice_reduced_state(c: Constellation) -> np.ndarray:
    """sum_ij sqrt(p_i p_j) <phi_j|phi_i> |i><j| with exact coherent overlaps."""
    st = c.states
    pr = np.sqrt(np.asarray(c.probabilities))
    rho = np.empty((N_LABELS, N_LABELS), dtype=complex)
    for i in range(N_LABELS):
        for j in range(N_LABELS):
            rho[i, j] = pr[i] * pr[j] * coherent_overlap(st[j], st[i])
    return hermitian_part(rho)


@dataclass(frozen=True)
class ConstraintSet:
    """Linear constraints Tr(operators[i] rho) = values[i] on rho_AB."""

    operators: np.ndarray
    values: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        ops = np.asarray(self.operators, dtype=complex)
        vals = np.asarray(self.values, dtype=float)
        if ops.ndim != 3 or ops.shape[1] != ops.shape[2] or ops.shape[0] != vals.shape[0]:
            raise ValueError("operators must be (n, d, d) with one value per operator")
        if not np.all(np.isfinite(vals)):
            raise ValueError("constraint values must be finite")
        for i, op in enumerate(ops):
            check_hermitian(op, name=f"constraint operator {i}")
        object.__setattr__(self, "operators", ops)
        object.__setattr__(self, "values", vals)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"c{i}" for i in range(len(vals))))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.operators.shape[1]

    def evaluate(self, rho: np.ndarray) -> np.ndarray:
        """Tr(Gamma_i rho) for every constraint (real parts)."""
        return np.real(np.einsum("kij,ji->k", self.operators, rho))

    def residuals(self, rho: np.ndarray) -> np.ndarray:
        return self.evaluate(rho) - self.values

    def with_values(self, values) -> "ConstraintSet":
        return ConstraintSet(self.operators, np.asarray(values, dtype=float), self.names)

    def trace_index(self) -> int | None:
        """Index of a constraint whose operator is the identity, if any."""
        eye = np.eye(self.dim)
        for i, op in enumerate(self.operators):
            if np.allclose(op, eye, rtol=0, atol=1e-14):
                return i
        return None


def build_constraints(c: Constellation, stats, n_cutoff: int) -> ConstraintSet:
    """Observable/expectation pairs fixing Alice's marginal and Bob's first two moments.

    ``stats`` needs per-label arrays ``mean_q``, ``mean_p``, ``mean_n`` and
    ``mean_d`` (see ``channel.ChannelStats``). The ordering is 16 moment
    constraints (label-major), 16 Hermitian pieces of Tr_B rho = rho_A, then
    the unit trace.
    """
    n_cutoff = check_cutoff(n_cutoff)
    dim_b = n_cutoff + 1
    quads = quadrature_ops(n_cutoff)
    try:
        means = {k: np.asarray(getattr(stats, f"mean_{k}"), dtype=float) for k in MOMENTS}
    except AttributeError as exc:
        raise ValueError(f"channel statistics are missing a moment: {exc}") from None
    for k, v in means.items():
        if v.shape != (N_LABELS,) or not np.all(np.isfinite(v)):
            raise ValueError(f"expected four finite values for <{k}>_x, got {v!r}")

    ops, vals, names = [], [], []
    probs = c.probabilities
    for x in range(N_LABELS):
        proj = np.zeros((N_LABELS, N_LABELS))
        proj[x, x] = 1.0
        for k in MOMENTS:
            ops.append(np.kron(proj, getattr(quads, k)))
            vals.append(probs[x] * means[k][x])
            names.append(f"{k}|{c.labels[x]}")

    rho_a = alice_reduced_state(c)
    eye_b = np.eye(dim_b)
    for i in range(N_LABELS):
        e = np.zeros((N_LABELS, N_LABELS), dtype=complex)
        e[i, i] = 1.0
        ops.append(np.kron(e, eye_b))
        vals.append(rho_a[i, i].real)
        names.append(f"rhoA[{i},{i}]")
    for i in range(N_LABELS):
        for j in range(i + 1, N_LABELS):
            e = np.zeros((N_LABELS, N_LABELS), dtype=complex)
            e[i, j] = e[j, i] = 1.0
            ops.append(np.kron(e, eye_b))
            vals.append(2.0 * rho_a[i, j].real)
            names.append(f"re rhoA[{i},{j}]")
            e = np.zeros((N_LABELS, N_LABELS), dtype=complex)
            e[i, j], e[j, i] = 1j, -1j
            ops.append(np.kron(e, eye_b))
            vals.append(2.0 * rho_a[i, j].imag)
            names.append(f"im rhoA[{i},{j}]")

    ops.append(np.eye(N_LABELS * dim_b, dtype=complex))
    vals.append(1.0)
    names.append("trace")
    return ConstraintSet(np.array(ops), np.array(vals), tuple(names))


@dataclass(frozen=True)
class KrausPair:
    """Stacked Kraus operators, each (2 * d) x d with d = 4 (n_cutoff + 1)."""

    q: np.ndarray
    p: np.ndarray
    delta: float
    n_cutoff: int

    def __getitem__(self, quadrature: str) -> np.ndarray:
        if quadrature == "q":
            return self.q
        if quadrature == "p":
            return self.p
        raise KeyError(quadrature)

    @property
    def dim(self) -> int:
        return self.q.shape[1]


def kraus_ops(delta: float, n_cutoff: int) -> KrausPair:
    n_cutoff = check_cutoff(n_cutoff)
    eye_a = np.eye(N_LABELS)
    stacked = {}
    for quad in ("q", "p"):
        blocks = [np.kron(eye_a, op_sqrt(interval_op(quad, b, delta, n_cutoff))) for b in (0, 1)]
        stacked[quad] = np.vstack(blocks)
    return KrausPair(stacked["q"], stacked["p"], float(delta), n_cutoff)


def apply_G(rho: np.ndarray, K: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape != (K.shape[1], K.shape[1]):
        raise ValueError(f"state of shape {rho.shape} does not match Kraus operator {K.shape}")
    return hermitian_part(K @ rho @ K.conj().T)


def apply_pinching(sigma: np.ndarray) -> np.ndarray:
    """Dephase the key register: zero the off-diagonal R blocks."""
    sigma = np.asarray(sigma)
    n = sigma.shape[0]
    if sigma.ndim != 2 or sigma.shape[1] != n or n % 2:
        raise ValueError(f"pinching needs an even square matrix, got shape {sigma.shape}")
    h = n // 2
    out = np.zeros_like(sigma)
    out[:h, :h] = sigma[:h, :h]
    out[h:, h:] = sigma[h:, h:]
    return out
