import numpy as np
import pytest

from qpsk_keyrate.channel import ChannelParams, simulate_channel
from qpsk_keyrate.protocol import ConstraintSet, build_constellation, build_constraints
from qpsk_keyrate.sdp import (
    INFEASIBLE,
    DualLmiProblem,
    LinearSdpProblem,
    SdpError,
    embed_hermitian,
    embed_state,
    solve_dual_lmi,
    solve_fw_subproblem,
    solve_init_maxmineig,
    unembed_state,
)


def random_hermitian(d, rng):
    m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return m + m.conj().T


@pytest.fixture(scope="module")
def toy():
    """N_c=2 constraint set whose targets come from a full-rank state."""
    c = build_constellation(0.66)
    cons = build_constraints(c, simulate_channel(c, ChannelParams(10, 0.02), 0.0), 2)
    rng = np.random.default_rng(1)
    z = rng.normal(size=(cons.dim, cons.dim)) + 1j * rng.normal(size=(cons.dim, cons.dim))
    r = z @ z.conj().T
    r /= np.trace(r).real
    return cons.with_values(cons.evaluate(r)), random_hermitian(cons.dim, np.random.default_rng(0))


def test_embedding_round_trip_and_inner_products():
    rng = np.random.default_rng(5)
    a, b = random_hermitian(4, rng), random_hermitian(4, rng)
    np.testing.assert_allclose(unembed_state(embed_state(a)), a, atol=1e-15)
    # Tr(emb(a) emb(b)/2) = Tr(a b)
    assert np.trace(embed_hermitian(a) @ embed_state(b)) == pytest.approx(np.trace(a @ b).real)
    assert np.allclose(np.sort(np.linalg.eigvalsh(embed_hermitian(a)))[::2], np.linalg.eigvalsh(a))


def test_trace_only_problem_gives_smallest_eigenvalue():
    h = random_hermitian(6, np.random.default_rng(2))
    cons = ConstraintSet(np.eye(6)[None], np.array([1.0]))
    rho = np.eye(6) / 6
    drho, rep = solve_fw_subproblem(LinearSdpProblem(h, cons), rho)
    assert rep.ok
    assert np.trace(h @ (rho + drho)).real == pytest.approx(np.linalg.eigvalsh(h)[0], abs=1e-8)
    value, y, _, rep = solve_dual_lmi(DualLmiProblem(cons.values, cons.operators, h))
    assert value == pytest.approx(np.linalg.eigvalsh(h)[0], abs=1e-8)
    assert value <= np.linalg.eigvalsh(h)[0] + 1e-12


def test_init_finds_interior_point(toy):
    cons, _ = toy
    rho0, t, rep = solve_init_maxmineig(cons)
    assert rep.ok
    assert t > 1e-4
    assert np.linalg.eigvalsh(rho0)[0] == pytest.approx(t, abs=1e-8)
    assert np.max(np.abs(cons.residuals(rho0))) < 1e-9


def test_init_reports_negative_margin_for_infeasible_set():
    # trace 1 with a diagonal block of weight 1.5 and the rest forced to be 0
    ops = np.array([np.eye(2), np.diag([1.0, 0.0])])
    rho0, t, rep = solve_init_maxmineig(ConstraintSet(ops, np.array([1.0, 1.5])))
    assert t < 0


def test_inconsistent_dependent_constraints_are_reported():
    ops = np.array([np.eye(3), 2 * np.eye(3)])
    _, rep = solve_fw_subproblem(LinearSdpProblem(np.eye(3), ConstraintSet(ops, np.array([1.0, 3.0]))),
                                 np.eye(3) / 3)
    assert rep.status == INFEASIBLE


def test_fw_subproblem_matches_cvxpy(toy):
    cp = pytest.importorskip("cvxpy")
    cons, h = toy
    rho0, _, _ = solve_init_maxmineig(cons)
    drho, rep = solve_fw_subproblem(LinearSdpProblem(h, cons), rho0)
    sigma = rho0 + drho
    assert rep.ok
    assert np.linalg.eigvalsh(sigma)[0] > -1e-8
    assert np.max(np.abs(cons.residuals(sigma))) < 1e-8

    x = cp.Variable((cons.dim, cons.dim), hermitian=True)
    prob = cp.Problem(cp.Minimize(cp.real(cp.trace(h @ x))),
                      [x >> 0] + [cp.real(cp.trace(g @ x)) == v for g, v in zip(cons.operators, cons.values)])
    prob.solve(solver=cp.CLARABEL)
    assert np.trace(h @ sigma).real == pytest.approx(prob.value, abs=1e-5)


@pytest.mark.parametrize("eps", [0.0, 1e-10, 1e-6])
def test_dual_is_weak_and_tight(toy, eps):
    cons, h = toy
    rho0, _, _ = solve_init_maxmineig(cons)
    drho, _ = solve_fw_subproblem(LinearSdpProblem(h, cons), rho0)
    primal = np.trace(h @ (rho0 + drho)).real
    value, y, z, rep = solve_dual_lmi(DualLmiProblem(cons.values, cons.operators, h, eps))
    slack = h - np.tensordot(y, cons.operators, axes=1)
    assert np.linalg.eigvalsh(slack)[0] >= -1e-12
    assert np.all(z >= np.abs(y) - 1e-12)
    assert value <= primal + 1e-7
    assert value >= primal - eps * np.sum(np.abs(y)) - 1e-7


def test_dual_value_decreases_with_eps(toy):
    cons, h = toy
    values = [solve_dual_lmi(DualLmiProblem(cons.values, cons.operators, h, e))[0] for e in (0, 1e-8, 1e-4)]
    assert values[0] >= values[1] >= values[2]


def test_dual_problem_validation():
    with pytest.raises(ValueError):
        DualLmiProblem(np.zeros(2), np.zeros((1, 2, 2)), np.eye(2))
    with pytest.raises(ValueError):
        DualLmiProblem(np.zeros(1), np.zeros((1, 2, 2)), np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValueError):
        DualLmiProblem(np.zeros(1), np.zeros((1, 2, 2)), np.eye(2), -1.0)


def test_unbounded_dual_raises():
    # no trace constraint and W indefinite: y Gamma <= W with Gamma = diag(1, 0) has
    # no solution since the (2,2) entry of W is negative
    ops = np.array([np.diag([1.0, 0.0])])
    with pytest.raises(SdpError):
        solve_dual_lmi(DualLmiProblem(np.array([0.5]), ops, np.diag([1.0, -1.0])))
