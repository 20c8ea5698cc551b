"""Derivative-free optimizers and design recovery from stress observations."""

import numpy as np
import pytest

from anisoforge import datagen as dg
from anisoforge import energy, inverse, training
from anisoforge import tensor_core as tc


def sphere(x):
    return float(np.sum(x**2))


def rosenbrock(x):
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))


# ---------------------------------------------------------------------------
# CMA-ES


def test_cma_sphere():
    res = inverse.cma_es(sphere, np.full(4, 2.0), 0.5, max_evals=5000, f_target=1e-10, seed=1)
    assert res.fun <= 1e-10
    assert res.n_evals <= 5000
    assert np.all(np.abs(res.x) < 1e-4)


def test_cma_rosenbrock():
    res = inverse.cma_es(rosenbrock, np.zeros(2), 0.3, max_evals=20000, f_target=1e-6, seed=2)
    assert res.fun <= 1e-6
    assert np.allclose(res.x, 1.0, atol=1e-2)


def test_cma_deterministic():
    a = inverse.cma_es(sphere, np.ones(3), 0.4, max_evals=600, seed=5)
    b = inverse.cma_es(sphere, np.ones(3), 0.4, max_evals=600, seed=5)
    assert np.array_equal(a.x, b.x) and a.fun == b.fun
    c = inverse.cma_es(sphere, np.ones(3), 0.4, max_evals=600, seed=6)
    assert not np.array_equal(a.x, c.x)


def test_cma_respects_bounds():
    bounds = np.array([[1.0, 3.0], [1.0, 3.0]])
    res = inverse.cma_es(sphere, np.array([2.5, 2.5]), 0.5, bounds=bounds,
                         max_evals=2000, seed=3)
    assert np.all(res.x >= 1.0 - 1e-12) and np.all(res.x <= 3.0 + 1e-12)
    # the constrained minimum of the sphere sits at the lower corner
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-3)


def test_cma_nan_regions_are_skirted():
    def holey(x):
        if x[0] < 0.0:
            return np.nan
        return sphere(x - 1.0)

    res = inverse.cma_es(holey, np.array([3.0, 3.0]), 0.5, max_evals=4000, f_target=1e-8, seed=4)
    assert res.fun <= 1e-8


def test_cma_all_nan_raises():
    with pytest.raises(RuntimeError, match="no finite values"):
        inverse.cma_es(lambda x: np.nan, np.zeros(2), 0.5, max_evals=100, seed=0)


def test_cma_history_monotone():
    res = inverse.cma_es(sphere, np.ones(3), 0.3, max_evals=900, seed=7)
    fb = [f for _, f in res.history]
    assert all(b <= a + 1e-300 for a, b in zip(fb, fb[1:]))
    evals = [e for e, _ in res.history]
    assert evals == sorted(evals)


def test_cma_stop_reasons():
    res = inverse.cma_es(sphere, np.ones(2), 0.3, max_evals=10**6, f_target=1e-9, seed=8)
    assert res.stop == "f_target"
    res = inverse.cma_es(lambda x: 0.0, np.ones(2), 0.3, max_evals=10**6, seed=8,
                         tol_stagnation=20)
    assert res.stop == "stagnation"


# ---------------------------------------------------------------------------
# Nelder-Mead


def test_nm_quadratic():
    res = inverse.nelder_mead(sphere, np.array([1.0, -2.0, 0.5]), step=0.5, tol=1e-12)
    assert res.fun < 1e-20
    assert np.all(np.abs(res.x) < 1e-10)


def test_nm_respects_bounds():
    bounds = np.array([[2.0, 5.0]])
    res = inverse.nelder_mead(sphere, np.array([4.0]), step=0.5, bounds=bounds, tol=1e-12)
    assert 2.0 - 1e-12 <= res.x[0] <= 5.0
    assert np.isclose(res.x[0], 2.0, atol=1e-6)


def test_nm_simplex_diameter_stop():
    res = inverse.nelder_mead(sphere, np.ones(2), step=0.3, tol=1e-8, max_evals=10**6)
    assert res.stop == "tol"


def test_nm_rosenbrock_local():
    res = inverse.nelder_mead(rosenbrock, np.array([-1.0, 1.0]), step=0.2,
                              max_evals=4000, tol=1e-14)
    assert res.fun < 1e-10


def test_nm_custom_coefficients():
    res = inverse.nelder_mead(sphere, np.array([1.0, -2.0]), step=0.4, tol=1e-12,
                              reflection=0.9, expansion=1.8, contraction=0.4, shrink=0.6)
    assert res.fun < 1e-18
    # degenerate expansion never improves on reflection but still converges
    res = inverse.nelder_mead(sphere, np.array([1.0, -2.0]), step=0.4, tol=1e-10,
                              expansion=1.0)
    assert res.fun < 1e-14


def test_fit_direction_from_structure_tensor():
    e2 = np.array([0.0, 1.0, 0.0])
    n, res = inverse.fit_direction(np.outer(e2, e2), x0=(1.0, 0.0, 0.0))
    assert abs(n @ e2) > 1.0 - 1e-6
    assert res.fun < 1e-10


def test_fit_direction_sign_invariant_objective():
    rng = np.random.default_rng(20)
    target = rng.standard_normal(3)
    target /= np.linalg.norm(target)
    N = np.outer(target, target)
    n_pos, _ = inverse.fit_direction(N, x0=target + 0.1)
    n_neg, _ = inverse.fit_direction(N, x0=-(target + 0.1))
    # n and -n carry the same structure tensor, so both poles are minima
    assert np.isclose(abs(n_pos @ target), 1.0, atol=1e-6)
    assert np.isclose(abs(n_neg @ target), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# design inversion on a synthetic surrogate


@pytest.fixture(scope="module")
def trained_like_model():
    # an untrained surrogate is still a deterministic map D -> stress field,
    # which is all the inversion layer needs for an exactness check
    model = training.model_for_known_class(2, "transiso", seed=11,
                                           width_x=8, width_y=6, depth=2)
    model.d_bounds = np.array([[1.0, 5.0], [3.0, 7.0]])
    F = dg.sample_F_lhs(16, seed=12)
    C = np.einsum("bki,bkj->bij", F, F)
    return model, C


def test_invert_recovers_design(trained_like_model):
    model, C = trained_like_model
    D_true = np.array([2.3, 5.1])
    S_obs = energy.stress(model, C, np.broadcast_to(D_true, (C.shape[0], 2)).copy())
    res = inverse.invert_design(model, C, S_obs, restarts=2, seed=13,
                                max_evals=6000, f_target=1e-18)
    assert res.objective < 1e-12
    assert np.allclose(res.D, D_true, atol=1e-4)
    assert res.orientation is None


def test_invert_free_orientation(trained_like_model):
    model, C = trained_like_model
    D_true = np.array([3.0, 4.0])
    R = tc.rotation_from_axis_angle(0.8, np.array([0.2, 1.0, 0.4]))
    structure = (np.outer(R[:, 0], R[:, 0]), np.outer(R[:, 1], R[:, 1]), R)
    S_obs = energy.stress(model, C, np.broadcast_to(D_true, (C.shape[0], 2)).copy(),
                          structure=structure)
    res = inverse.invert_design(model, C, S_obs, restarts=4, seed=14,
                                free_orientation=True, max_evals=8000, f_target=1e-16)
    assert res.objective < 1e-10
    assert np.allclose(res.D, D_true, atol=1e-3)
    n1 = res.orientation["n1"]
    assert abs(n1 @ R[:, 0]) > 0.99


def test_invert_trace_file(trained_like_model, tmp_path):
    model, C = trained_like_model
    D_true = np.array([2.0, 6.0])
    S_obs = energy.stress(model, C, np.broadcast_to(D_true, (C.shape[0], 2)).copy())
    trace = tmp_path / "trace.csv"
    res = inverse.invert_design(model, C, S_obs, restarts=2, seed=15,
                                max_evals=600, trace_path=trace)
    lines = trace.read_text().splitlines()
    assert lines[0] == "restart,evals,best_objective"
    assert len(lines) > 2
    report = res.report()
    assert set(report) >= {"design", "objective", "n_evals", "restarts"}


def test_invert_nelder_mead_route(trained_like_model):
    model, C = trained_like_model
    D_true = np.array([4.2, 3.4])
    S_obs = energy.stress(model, C, np.broadcast_to(D_true, (C.shape[0], 2)).copy())
    res = inverse.invert_design(model, C, S_obs, method="nelder-mead", restarts=3,
                                seed=16, max_evals=3000, f_target=1e-18)
    assert res.objective < 1e-10
    assert np.allclose(res.D, D_true, atol=1e-3)


def test_invert_requires_bounds():
    model = training.model_for_known_class(2, "iso", width_x=8, width_y=6, depth=2)
    C = np.eye(3)[None]
    with pytest.raises(ValueError, match="bounds"):
        inverse.invert_design(model, C, np.zeros((1, 3, 3)))


def test_invert_unknown_method(trained_like_model):
    model, C = trained_like_model
    with pytest.raises(ValueError, match="unknown method"):
        inverse.invert_design(model, C, np.zeros_like(C), method="gradient", restarts=1)
