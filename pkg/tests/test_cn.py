import numpy as np
import pytest

from flashmp.cn_driver import (CnSolver, EmState, StepFailure, build_rhs, cn_step,
                               load_checkpoint, save_checkpoint)
from flashmp.grid import Box, FieldVector
from flashmp.krylov import SolverConfig
from flashmp.schwarz import SerialTransport
from oracles import dense_curl, dense_double_curl


def _random_state(box, dt, seed=0):
    rng = np.random.default_rng(seed)
    return EmState(
        E=FieldVector(box, rng.uniform(-1, 1, box.dof)),
        H=FieldVector(box, rng.uniform(-1, 1, box.dof)),
        t=0, dt=dt)


def _solver(box, dt, method="bicgstab", grid=(1, 1, 1), overlap=1, max_iter=200):
    alpha = dt * dt / 4.0
    cfg = SolverConfig(method=method, tol=1e-12, max_iter=max_iter)
    return CnSolver(box, grid, overlap, alpha, cfg, SerialTransport())


def test_state_requires_matching_boxes():
    with pytest.raises(ValueError):
        EmState(FieldVector.zeros(Box(2, 2, 2)), FieldVector.zeros(Box(3, 2, 2)), 0, 1.0)


def test_build_rhs_zero_state():
    box = Box(3, 3, 3)
    st = EmState(FieldVector.zeros(box), FieldVector.zeros(box), 0, 1.0)
    assert not build_rhs(st).data.any()


def test_build_rhs_dt_zero_returns_e():
    box = Box(2, 3, 2)
    st = _random_state(box, dt=0.0, seed=1)
    assert np.array_equal(build_rhs(st).data, st.E.data)


def test_build_rhs_matches_dense_evaluation():
    box = Box(3, 3, 3)
    dt = 0.8
    st = _random_state(box, dt, seed=2)
    alpha = dt * dt / 4.0
    want = (st.E.data + dt * dense_curl(box, "backward") @ st.H.data
            - alpha * dense_double_curl(box) @ st.E.data)
    got = build_rhs(st)
    assert np.linalg.norm(got.data - want) / np.linalg.norm(want) <= 1e-13


def test_zero_state_stays_zero():
    box = Box(4, 4, 4)
    solver = _solver(box, dt=1.0)
    st = EmState(FieldVector.zeros(box), FieldVector.zeros(box), 0, 1.0)
    for _ in range(3):
        st, rep = cn_step(st, solver)
        assert rep.converged
    assert not st.E.data.any()
    assert not st.H.data.any()
    assert st.t == 3


def test_dt_zero_step_is_identity():
    box = Box(4, 4, 4)
    solver = _solver(box, dt=0.0)
    st = _random_state(box, dt=0.0, seed=3)
    new, rep = cn_step(st, solver)
    assert rep.converged and rep.iterations == 1
    assert np.allclose(new.E.data, st.E.data, atol=1e-13)
    assert np.array_equal(new.H.data, st.H.data)
    assert new.t == 1


def test_step_is_linear_in_the_state():
    box = Box(4, 4, 4)
    dt = 1.0
    solver = _solver(box, dt)
    sa = _random_state(box, dt, seed=4)
    sb = _random_state(box, dt, seed=5)
    a, b = 0.6, -1.7
    combo = EmState(
        E=FieldVector(box, a * sa.E.data + b * sb.E.data),
        H=FieldVector(box, a * sa.H.data + b * sb.H.data),
        t=0, dt=dt)
    stepped_combo, _ = cn_step(combo, solver)
    ra, _ = cn_step(sa, solver)
    rb, _ = cn_step(sb, solver)
    for got, want in ((stepped_combo.E.data, a * ra.E.data + b * rb.E.data),
                      (stepped_combo.H.data, a * ra.H.data + b * rb.H.data)):
        assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-10


def test_hundred_steps_bounded_and_resolved():
    box = Box(8, 8, 8)
    dt = 1.0
    solver = _solver(box, dt)
    st = _random_state(box, dt, seed=6)
    initial = max(np.abs(st.E.data).max(), np.abs(st.H.data).max())
    for _ in range(100):
        st, rep = cn_step(st, solver)
        assert rep.converged
        assert rep.final_relres <= 1e-12
        assert np.isfinite(st.E.data).all() and np.isfinite(st.H.data).all()
    final = max(np.abs(st.E.data).max(), np.abs(st.H.data).max())
    assert final <= 10.0 * initial
    assert st.t == 100


def test_non_convergence_raises_step_failure():
    box = Box(8, 8, 8)
    dt = 1.0
    alpha = dt * dt / 4.0
    cfg = SolverConfig(method="bicgstab", tol=1e-12, max_iter=1, preconditioner="none")
    solver = CnSolver(box, (1, 1, 1), 1, alpha, cfg, SerialTransport())
    with pytest.raises(StepFailure, match="step 0"):
        cn_step(_random_state(box, dt, seed=7), solver)


def test_multirank_stepping_matches_single_rank():
    box = Box(8, 4, 4)
    dt = 1.0
    st = _random_state(box, dt, seed=9)
    one = _solver(box, dt)
    two = _solver(box, dt, grid=(2, 1, 1))
    a, _ = cn_step(st, one)
    b, _ = cn_step(st, two)
    assert np.linalg.norm(a.E.data - b.E.data) / np.linalg.norm(a.E.data) <= 1e-11
    assert np.linalg.norm(a.H.data - b.H.data) / np.linalg.norm(a.H.data) <= 1e-11


def test_checkpoint_round_trip(tmp_path):
    box = Box(3, 4, 2)
    st = _random_state(box, dt=0.5, seed=8)
    st = EmState(st.E, st.H, t=17, dt=0.5)
    save_checkpoint(st, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.t == 17
    assert back.dt == 0.5
    assert np.array_equal(back.E.data, st.E.data)
    assert np.array_equal(back.H.data, st.H.data)
