"""Primal-dual interior-point solver for small dense semidefinite programs.

The core works on the real standard form

    min  <C, X> + c_lin . x + c_free . u
    s.t. A(X) + A_lin x + A_free u = b,   X psd, x >= 0, u free

with dual

    max  b . y
    s.t. C - A*(y) = S psd,  c_lin - A_lin^T y = s >= 0,  A_free^T y = c_free.

Hermitian problems are mapped to real symmetric ones of twice the size via
H -> [[Re H, -Im H], [Im H, Re H]]. Directions use Nesterov-Todd scaling and a
Mehrotra predictor-corrector step from an infeasible starting point.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .fock import check_hermitian, hermitian_part
from .protocol import ConstraintSet

OPTIMAL = "optimal"
NEAR_OPTIMAL = "near-optimal"
INFEASIBLE = "infeasible"
FAILURE = "numerical-failure"


@dataclass(frozen=True)
class SolverSettings:
    tol_residual: float = 1e-9
    tol_gap: float = 1e-9
    max_iter: int = 200
    near_tol: float = 1e-6
    step_fraction: float = 0.98


DEFAULT_SETTINGS = SolverSettings()


@dataclass
class SolverReport:
    status: str
    objective_value: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (OPTIMAL, NEAR_OPTIMAL)


class SdpError(RuntimeError):
    def __init__(self, message: str, report: SolverReport | None = None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Hermitian <-> real symmetric embedding


def embed_hermitian(h: np.ndarray) -> np.ndarray:
    re, im = h.real, h.imag
    return np.block([[re, -im], [im, re]])


def embed_state(rho: np.ndarray) -> np.ndarray:
    """Real variable X with <embed_hermitian(A), X> = Tr(A rho)."""
    return 0.5 * embed_hermitian(rho)


def unembed_state(x: np.ndarray) -> np.ndarray:
    """Inverse of ``embed_state``, averaging over the redundant blocks."""
    n = x.shape[0] // 2
    re = x[:n, :n] + x[n:, n:]
    im = x[n:, :n] - x[:n, n:]
    return hermitian_part(re + 1j * im)


# ---------------------------------------------------------------------------
# Core real solver


@dataclass
class _Solution:
    X: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    S: np.ndarray
    s: np.ndarray
    pobj: float
    dobj: float
    report: SolverReport
    kept_rows: np.ndarray = field(default=None)


_ROW_BASIS_CACHE: dict = {}


def _row_basis(rows: np.ndarray, tol: float):
    # Frank-Wolfe re-solves with identical constraint operators, so cache by content
    key = (hashlib.blake2b(np.ascontiguousarray(rows).tobytes(), digest_size=16).digest(), rows.shape, tol)
    hit = _ROW_BASIS_CACHE.get(key)
    if hit is not None:
        return hit
    scale = np.linalg.norm(rows, axis=1)
    scale[scale == 0] = 1.0
    normed = rows / scale[:, None]
    _, r, piv = sla.qr(normed.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * max(diag[0], 1.0))) if diag.size else 0
    keep = np.sort(piv[:rank])
    coef = None
    if rank < rows.shape[0]:
        coef, *_ = np.linalg.lstsq(normed[keep].T, normed.T, rcond=None)
    if len(_ROW_BASIS_CACHE) > 32:
        _ROW_BASIS_CACHE.clear()
    _ROW_BASIS_CACHE[key] = (keep, coef, scale)
    return keep, coef, scale


def _independent_rows(rows: np.ndarray, b: np.ndarray, tol: float = 1e-10):
    """Indices of a maximal independent row subset and the inconsistency of the rest."""
    if rows.shape[0] == 0:
        return np.arange(0), 0.0
    keep, coef, scale = _row_basis(rows, tol)
    if coef is None:
        return keep, 0.0
    # least-squares consistency of the dropped right-hand sides
    bn = b / scale
    mismatch = np.max(np.abs(coef.T @ bn[keep] - bn))
    return keep, float(mismatch)


def _max_step(v: np.ndarray, d: np.ndarray) -> float:
    """Largest a with diag(v) + a d psd, for v > 0."""
    w = 1.0 / np.sqrt(v)
    lam = np.linalg.eigvalsh(w[:, None] * d * w[None, :])[0]
    return np.inf if lam >= 0 else -1.0 / lam


def _max_step_lp(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def solve_conic(
    C: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    c_lin: np.ndarray | None = None,
    A_lin: np.ndarray | None = None,
    c_free: np.ndarray | None = None,
    A_free: np.ndarray | None = None,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> _Solution:
    C = 0.5 * (C + C.T)
    n = C.shape[0]
    m_all = b.shape[0]
    c_lin = np.zeros(0) if c_lin is None else np.asarray(c_lin, dtype=float)
    A_lin = np.zeros((m_all, 0)) if A_lin is None else np.asarray(A_lin, dtype=float)
    c_free = np.zeros(0) if c_free is None else np.asarray(c_free, dtype=float)
    A_free = np.zeros((m_all, 0)) if A_free is None else np.asarray(A_free, dtype=float)
    k, nf = c_lin.size, c_free.size

    rows = np.hstack([A.reshape(m_all, -1), A_lin, A_free])
    keep, mismatch = _independent_rows(rows, b)
    if mismatch > 1e-9 * (1 + np.max(np.abs(b), initial=0.0)):
        report = SolverReport(INFEASIBLE, np.nan, mismatch, np.nan, np.nan, 0,
                              "linearly dependent constraints with inconsistent right-hand sides")
        return _Solution(np.eye(n), np.ones(k), np.zeros(nf), np.zeros(m_all), np.eye(n),
                         np.ones(k), np.nan, np.nan, report, keep)
    A, b, A_lin, A_free = A[keep], b[keep], A_lin[keep], A_free[keep]
    m = b.size
    A_flat = A.reshape(m, -1)

    norm_a = np.linalg.norm(A_flat, axis=1)
    norm_b = np.linalg.norm(b)
    norm_c = np.sqrt(np.linalg.norm(C) ** 2 + np.linalg.norm(c_lin) ** 2 + np.linalg.norm(c_free) ** 2)
    xi0 = max(10.0, np.sqrt(n), n * np.max((1 + np.abs(b)) / (1 + norm_a), initial=1.0))
    eta0 = max(10.0, np.sqrt(n), np.max(norm_a, initial=0.0), np.linalg.norm(C))
    X, S = xi0 * np.eye(n), eta0 * np.eye(n)
    x, s = xi0 * np.ones(k), eta0 * np.ones(k)
    y, u = np.zeros(m), np.zeros(nf)
    n_cone = n + k
    tau = settings.step_fraction

    best = None
    status, message = FAILURE, "iteration limit reached"
    it = 0
    for it in range(settings.max_iter + 1):
        rp = b - A_flat @ X.ravel() - A_lin @ x - A_free @ u
        Rd = C - np.tensordot(y, A, axes=1) - S
        rdl = c_lin - A_lin.T @ y - s
        rdf = c_free - A_free.T @ y
        pobj = float(np.vdot(C, X) + c_lin @ x + c_free @ u)
        dobj = float(b @ y)
        mu = (float(np.vdot(X, S)) + float(x @ s)) / n_cone
        pinf = np.linalg.norm(rp) / (1 + norm_b)
        dinf = np.sqrt(np.linalg.norm(Rd) ** 2 + rdl @ rdl + rdf @ rdf) / (1 + norm_c)
        relgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        merit = max(pinf, dinf, relgap)
        if best is None or merit < best[0]:
            best = (merit, X.copy(), x.copy(), u.copy(), y.copy(), S.copy(), s.copy(),
                    pobj, dobj, pinf, dinf, relgap, it)
        if pinf <= settings.tol_residual and dinf <= settings.tol_residual and relgap <= settings.tol_gap:
            status, message = OPTIMAL, ""
            break
        if dinf <= settings.near_tol and dobj > 1e8 * (1 + abs(pobj)) and pinf > settings.near_tol:
            status, message = INFEASIBLE, "dual objective diverges: primal constraints infeasible"
            break
        if pinf <= settings.near_tol and pobj < -1e8 * (1 + abs(dobj)) and dinf > settings.near_tol:
            status, message = INFEASIBLE, "primal objective diverges: dual constraints infeasible"
            break
        if it == settings.max_iter:
            break

        try:
            L = np.linalg.cholesky(X)
            lam, Q = np.linalg.eigh(L.T @ S @ L)
            if lam[0] <= 0:
                raise np.linalg.LinAlgError("scaling matrix lost definiteness")
            G = (L @ Q) * lam ** -0.25
            v = np.sqrt(lam)
            B = np.matmul(np.matmul(G.T, A), G)
            B_flat = B.reshape(m, -1)
            D = x / s
            M = B_flat @ B_flat.T + (A_lin * D) @ A_lin.T
            M = 0.5 * (M + M.T)
            try:
                fac = sla.cho_factor(M)
            except np.linalg.LinAlgError:
                M[np.diag_indices_from(M)] += 1e-14 * max(1.0, np.max(np.diag(M)))
                fac = sla.cho_factor(M)
            if nf:
                minv_af = sla.cho_solve(fac, A_free)
                schur_free = A_free.T @ minv_af
        except (np.linalg.LinAlgError, ValueError) as exc:
            status, message = FAILURE, f"factorization failed: {exc}"
            break

        Rd_s = G.T @ Rd @ G
        vsum = v[:, None] + v[None, :]

        def direction(T, tl):
            Rc_s = 2.0 * T / vsum
            rhs = rp - B_flat @ (Rc_s - Rd_s).ravel() - A_lin @ (tl / s - D * rdl)
            minv_r = sla.cho_solve(fac, rhs)
            if nf:
                du = np.linalg.solve(schur_free, A_free.T @ minv_r - rdf)
                dy = minv_r - minv_af @ du
            else:
                du = np.zeros(0)
                dy = minv_r
            dS_s = Rd_s - np.tensordot(dy, B, axes=1)
            dS_s = 0.5 * (dS_s + dS_s.T)
            dX_s = Rc_s - dS_s
            ds = rdl - A_lin.T @ dy
            dx = (tl - x * ds) / s
            return dX_s, dS_s, dy, du, dx, ds

        def steps(dX_s, dS_s, dx, ds):
            ap = min(_max_step(v, dX_s), _max_step_lp(x, dx))
            ad = min(_max_step(v, dS_s), _max_step_lp(s, ds))
            return ap, ad

        diag_v = np.diag(v)
        aff = direction(-np.diag(v * v), -x * s)
        ap, ad = steps(aff[0], aff[1], aff[4], aff[5])
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_aff = (float(np.vdot(diag_v + ap * aff[0], diag_v + ad * aff[1]))
                  + float((x + ap * aff[4]) @ (s + ad * aff[5]))) / n_cone
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3
        corr = aff[0] @ aff[1]
        T = sigma * mu * np.eye(n) - np.diag(v * v) - 0.5 * (corr + corr.T)
        tl = sigma * mu - x * s - aff[4] * aff[5]
        dX_s, dS_s, dy, du, dx, ds = direction(T, tl)
        ap, ad = steps(dX_s, dS_s, dx, ds)
        ap, ad = min(1.0, tau * ap), min(1.0, tau * ad)

        dX = G @ dX_s @ G.T
        dS = Rd - np.tensordot(dy, A, axes=1)
        X = X + ap * 0.5 * (dX + dX.T)
        x = x + ap * dx
        u = u + ap * du
        y = y + ad * dy
        S = S + ad * 0.5 * (dS + dS.T)
        s = s + ad * ds

    if status not in (OPTIMAL, INFEASIBLE):
        merit, X, x, u, y, S, s, pobj, dobj, pinf, dinf, relgap, _ = best
        if merit <= settings.near_tol:
            status = NEAR_OPTIMAL
        elif pinf > settings.near_tol and dinf <= settings.near_tol:
            status, message = INFEASIBLE, message or "primal residual did not converge"
    else:
        pinf = np.linalg.norm(b - A_flat @ X.ravel() - A_lin @ x - A_free @ u) / (1 + norm_b)
        dinf = np.linalg.norm(C - np.tensordot(y, A, axes=1) - S) / (1 + norm_c)
        relgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))

    y_full = np.zeros(m_all)
    y_full[keep] = y
    report = SolverReport(status, pobj, float(pinf), float(dinf), float(relgap), it, message)
    return _Solution(X, x, u, y_full, S, s, pobj, dobj, report, keep)


# ---------------------------------------------------------------------------
# Problem shapes used by the key-rate pipeline


@dataclass(frozen=True)
class LinearSdpProblem:
    """min Tr(objective sigma) over sigma psd with Tr(Gamma_i sigma) = gamma_i."""

    objective: np.ndarray
    constraints: ConstraintSet

    @property
    def dim(self) -> int:
        return self.constraints.dim


@dataclass(frozen=True)
class DualLmiProblem:
    """max gamma.y - eps_prime sum(z) s.t. sum_i y_i Gamma_i <= W and -z <= y <= z."""

    gamma: np.ndarray
    gammas: np.ndarray
    W: np.ndarray
    eps_prime: float = 0.0

    def __post_init__(self):
        if len(self.gamma) != len(self.gammas):
            raise ValueError("gamma and Gamma lists differ in length")
        check_hermitian(self.W, tol=1e-9, name="dual bound matrix W")
        if not self.eps_prime >= 0:
            raise ValueError("eps_prime must be >= 0")


def _embedded_ops(constraints: ConstraintSet) -> np.ndarray:
    return np.array([embed_hermitian(op) for op in constraints.operators])


def solve_init_maxmineig(constraints: ConstraintSet, settings: SolverSettings = DEFAULT_SETTINGS):
    """Feasible state maximizing its smallest eigenvalue.

    The eigenvalue shift t is a free variable, so the program stays feasible
    when the constraint set has no interior; ``t < 0`` then signals that no
    strictly positive (or no positive at all) state satisfies the constraints.
    Returns ``(rho0, t, report)``.
    """
    d = constraints.dim
    A = _embedded_ops(constraints)
    traces = np.real(np.trace(constraints.operators, axis1=1, axis2=2))
    sol = solve_conic(
        np.zeros((2 * d, 2 * d)), A, constraints.values,
        c_free=np.array([-1.0]), A_free=traces[:, None], settings=settings,
    )
    t = float(sol.u[0]) if sol.u.size else np.nan
    rho0 = unembed_state(sol.X) + t * np.eye(d)
    sol.report.objective_value = t
    if sol.report.status == INFEASIBLE:
        sol.report.message = sol.report.message or "constraint set is empty"
    else:
        sol.report.primal_residual = float(np.max(np.abs(constraints.residuals(rho0))))
    return rho0, t, sol.report


def solve_fw_subproblem(problem: LinearSdpProblem, rho: np.ndarray,
                        settings: SolverSettings = DEFAULT_SETTINGS):
    """Direction ``delta_rho`` minimizing Tr(delta_rho C) with rho + delta_rho feasible."""
    cons = problem.constraints
    C = check_hermitian(problem.objective, tol=1e-9, name="objective")
    sol = solve_conic(embed_hermitian(hermitian_part(C)), _embedded_ops(cons), cons.values,
                      settings=settings)
    sigma = unembed_state(sol.X)
    delta_rho = sigma - rho
    report = sol.report
    report.objective_value = float(np.real(np.vdot(C.conj().T, delta_rho)))
    if np.max(np.abs(C)) == 0:
        report.message = "degenerate objective: every feasible direction is optimal"
    return delta_rho, report


def _lmi_slack(W, gammas, y):
    return hermitian_part(W - np.tensordot(y, gammas, axes=1))


def solve_dual_lmi(problem: DualLmiProblem, settings: SolverSettings = DEFAULT_SETTINGS):
    """Maximize gamma.y - eps' |y|_1 subject to sum y_i Gamma_i <= W.

    The returned point is checked by an explicit eigenvalue computation and
    repaired if the LMI is violated, so the value is always achieved by a
    feasible dual point and is therefore a valid lower bound. Returns
    ``(value, y, z, report)``.
    """
    gammas = np.asarray(problem.gammas, dtype=complex)
    gamma = np.asarray(problem.gamma, dtype=float)
    W = hermitian_part(np.asarray(problem.W, dtype=complex))
    n = gamma.size
    d = W.shape[0]
    Ws = embed_hermitian(W)
    As = np.array([embed_hermitian(g) for g in gammas])
    eps = float(problem.eps_prime)

    if eps == 0.0:
        sol = solve_conic(Ws, As, gamma, settings=settings)
        y = sol.y
    else:
        # variables (y, w) with w = eps' z, so the box multipliers stay O(1)
        # for tiny eps'; |y_i| <= z_i becomes w_i -/+ eps' y_i >= 0
        A_all = np.concatenate([As, np.zeros((n, 2 * d, 2 * d))])
        b_all = np.concatenate([gamma, -np.ones(n)])
        eye = np.eye(n)
        A_lin = np.vstack([np.hstack([eps * eye, -eps * eye]), np.hstack([-eye, -eye])])
        sol = solve_conic(Ws, A_all, b_all, c_lin=np.zeros(2 * n), A_lin=A_lin, settings=settings)
        y = sol.y[:n]
    report = sol.report
    if report.status == INFEASIBLE:
        raise SdpError(f"dual problem is unbounded or infeasible: {report.message}", report)
    if not np.all(np.isfinite(y)):
        raise SdpError("dual solve produced non-finite multipliers", report)

    y = y.copy()
    slack_min = float(np.linalg.eigvalsh(_lmi_slack(W, gammas, y))[0])
    if slack_min < 0:
        trace_idx = ConstraintSet(gammas, gamma).trace_index()
        # margin covers the eigenvalue solver's own error
        margin = 16 * d * np.finfo(float).eps * max(1.0, np.linalg.norm(W, 2))
        if trace_idx is not None:
            y[trace_idx] += slack_min - margin
            report.message = f"shifted identity multiplier by {slack_min - margin:.3e} to restore LMI feasibility"
        elif np.linalg.eigvalsh(W)[0] >= 0:
            lo, hi = 0.0, 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if np.linalg.eigvalsh(_lmi_slack(W, gammas, mid * y))[0] >= 0:
                    lo = mid
                else:
                    hi = mid
            y = lo * y
            report.message = f"scaled multipliers by {lo:.6f} to restore LMI feasibility"
        else:
            raise SdpError(f"dual point violates the LMI by {-slack_min:.3e} and cannot be repaired", report)
        slack_min = float(np.linalg.eigvalsh(_lmi_slack(W, gammas, y))[0])
        if slack_min < -1e-9:
            raise SdpError(f"dual repair failed: LMI slack {slack_min:.3e}", report)

    z = np.abs(y)
    value = float(gamma @ y - eps * z.sum())
    report.objective_value = value
    return value, y, z, report
