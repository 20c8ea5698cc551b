"""Acceptance suite: one test per shipped guarantee, in release order.

Every test states its claim and tolerance in the docstring and asserts
exactly that, so `pytest -v tests/test_acceptance.py` reads as a checklist.
The desk-scale training runs are shared through module-scoped fixtures;
expect the whole file to take ten to fifteen minutes.
"""

import time

import numpy as np
import pytest

from anisoforge import datagen as dg, energy, fem, inverse, picnn, training, tensor_core as tc
from util import rand_spd, rand_rotation, fd_grad_wrt_C, rel_err

pytestmark = pytest.mark.acceptance

MODES = ("polyconvex", "nonpoly_linearC", "unconstrained")

# Desk-scale discovery settings: 3x3 design grids, 100 deformations per
# design drawn independently, 2e4 epochs. The sparsity penalty is raised
# above its long-run default so activity factors settle within the short
# epoch budget.
DESK_NET = {"width_x": 24, "width_y": 16, "depth": 3}
DESK_EPOCHS = 20_000
DESK_EPS = 1e-2

make_rng = np.random.default_rng


def random_aniso_state(rng):
    return energy.AnisotropyState(
        alpha_bar=rng.uniform(-2.0, 2.0, 2),
        phi=rng.uniform(0.1, 3.0),
        p_raw=rng.uniform(-1.0, 1.0, 3) + np.array([0.0, 0.0, 1.1]),
    )


# ---------------------------------------------------------------------------
# shared desk-scale runs


# The orthotropic desk grid varies (c4, c5) with c1 fixed mid-range so all
# three discovery runs share the same 3x3-by-100 batch size.
ORTHO_DESK_GRID = {
    "c1": np.array([3.0]),
    "c4": np.linspace(3.0, 7.0, 3),
    "c5": np.linspace(2.0, 6.0, 3),
}


@pytest.fixture(scope="module")
def desk_runs():
    """Discovery training on all three generated material classes."""
    runs = {}
    for aniso_class in ("iso", "transiso", "ortho"):
        grid = ORTHO_DESK_GRID if aniso_class == "ortho" else None
        cfg = dg.DataConfig(aniso_class=aniso_class, grid=grid, grid_points=3,
                            n_f=100, independent_f=True, seed=0)
        ds = dg.build_dataset(cfg)
        model = training.model_for_discovery(ds.D.shape[1], seed=0, **DESK_NET)
        tcfg = training.TrainConfig(epochs=DESK_EPOCHS, eps=DESK_EPS, log_every=2000)
        runs[aniso_class] = training.train(model, ds, tcfg)
    return runs


@pytest.fixture(scope="module")
def fiber_surrogate():
    """Known-class transversely isotropic surrogate for the inverse problems.

    Trained on a 5x5 design grid with a shared deformation batch so the
    seen-design rows of the dataset are exact closed-form targets.
    """
    cfg = dg.DataConfig(
        aniso_class="transiso",
        grid={"c1": np.linspace(1.0, 5.0, 5), "c4": np.linspace(3.0, 7.0, 5)},
        n_f=60,
        seed=0,
    )
    ds = dg.build_dataset(cfg)
    model = training.model_for_known_class(ds.D.shape[1], "transiso", seed=0, **DESK_NET)
    res = training.train(model, ds, training.TrainConfig(epochs=DESK_EPOCHS, log_every=2000))
    model = res.model
    model.d_bounds = np.array([[1.0, 5.0], [3.0, 7.0]])
    return model, ds


# ---------------------------------------------------------------------------
# 1) stress-free, energy-free reference state


def test_01_reference_state_is_stress_free():
    """S(I, D) vanishes below 1e-8 and psi(I, D) below 1e-10 for 1e3 random
    draws of weights, design vectors, and orientations in every mode, in
    under a minute."""
    t0 = time.time()
    for mode in MODES:
        worst_S, worst_psi = 0.0, 0.0
        for k in range(10):
            rng = make_rng(1000 + k)
            aniso_class = ("iso", "transiso", "ortho")[k % 3]
            aniso = None if aniso_class == "iso" else random_aniso_state(rng)
            model = energy.new_model(3, mode=mode, aniso_class=aniso_class,
                                     width_x=12, width_y=8, depth=2,
                                     seed=2000 + k, aniso=aniso)
            D = rng.uniform(0.5, 5.0, (100, 3))
            C = np.broadcast_to(np.eye(3), (100, 3, 3)).copy()
            worst_S = max(worst_S, np.max(np.abs(energy.stress(model, C, D))))
            worst_psi = max(worst_psi, np.max(np.abs(energy.psi(model, C, D))))
        assert worst_S < 1e-8, (mode, worst_S)
        assert worst_psi < 1e-10, (mode, worst_psi)
    assert time.time() - t0 < 60.0


# ---------------------------------------------------------------------------
# 2) analytic derivatives against central finite differences


def test_02_derivatives_match_finite_differences():
    """Network input gradient and Hessian, stress as 2 dPsi/dC, tangent as
    the derivative of stress, and the per-parameter training gradients all
    match central differences (1e-5 first order, 1e-4 second order,
    relative), in under five minutes."""
    t0 = time.time()
    rng = make_rng(21)

    # network value gradient and Hessian in invariant space
    net = picnn.init_params(8, 2, width_x=10, width_y=8, depth=3, seed=3)
    X = rng.uniform(0.5, 4.0, (5, 8))
    Y = rng.uniform(1.0, 5.0, (5, 2))
    _, G = picnn.value_and_grad(net, X, Y)
    H = picnn.hess_inputs(net, X, Y)
    h = 1e-6
    for b in range(X.shape[0]):
        for i in range(8):
            Xp, Xm = X.copy(), X.copy()
            Xp[b, i] += h
            Xm[b, i] -= h
            fd = (picnn.value(net, Xp, Y)[b] - picnn.value(net, Xm, Y)[b]) / (2 * h)
            assert rel_err(fd, G[b, i], floor=1e-6) < 1e-5
            _, Gp = picnn.value_and_grad(net, Xp, Y)
            _, Gm = picnn.value_and_grad(net, Xm, Y)
            fd_row = (Gp[b] - Gm[b]) / (2 * h)
            assert rel_err(fd_row, H[b, i], floor=1e-5) < 1e-4

    # stress against the energy, tangent against the stress
    for mode in MODES:
        aniso = random_aniso_state(rng)
        model = energy.new_model(2, mode=mode, aniso_class="ortho",
                                 width_x=6, width_y=5, depth=2, seed=31, aniso=aniso)
        C = rand_spd(rng)
        D = rng.uniform(1.0, 5.0, 2)
        S = energy.stress(model, C, D)
        S_fd = 2.0 * fd_grad_wrt_C(lambda c: energy.psi(model, c, D), C)
        assert rel_err(S_fd, S, floor=1e-6) < 1e-5, mode
        M = energy.tangent(model, C, D)
        for b, (k, l) in enumerate(tc.VOIGT):
            Cp, Cm = C.copy(), C.copy()
            Cp[k, l] += h
            Cm[k, l] -= h
            if k != l:
                Cp[l, k] += h
                Cm[l, k] -= h
            col = tc.sym_to_6((energy.stress(model, Cp, D) - energy.stress(model, Cm, D)) / (2 * h))
            ref = M[:, b] * (1.0 if k != l else 0.5)
            assert rel_err(col, ref, floor=1e-5) < 1e-4, (mode, b)

    # training gradients for every parameter of a width-4 network
    cfg = dg.DataConfig(aniso_class="transiso", grid_points=2, n_f=6, seed=5)
    ds = dg.build_dataset(cfg)
    model = energy.new_model(ds.D.shape[1], width_x=4, width_y=4, depth=2, seed=7)
    model.aniso = energy.AnisotropyState(
        alpha_bar=np.array([0.4, -0.3]), phi=0.7, p_raw=np.array([0.3, -1.2, 0.8]),
        trainable_alpha=True, trainable_orientation=True)
    ws = energy.make_workspace(model, ds.C, ds.D, ds.S)
    lg = energy.loss_and_param_gradients(model, ws)

    def data_loss():
        return training.loss(model, ds, eps=0.0)

    # the loss sits near 1e2 while some orientation gradients are 1e-3, so
    # a slightly wider stencil is needed to keep cancellation noise small
    h = 1e-5

    for name, W in model.net.weights.items():
        it = np.nditer(W, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = W[idx]
            W[idx] = keep + h
            up = data_loss()
            W[idx] = keep - h
            down = data_loss()
            W[idx] = keep
            assert rel_err((up - down) / (2 * h), lg.dnet[name][idx], floor=1e-6) < 1e-5, name
    for i in range(2):
        keep = model.aniso.alpha_bar[i]
        model.aniso.alpha_bar[i] = keep + h
        up = data_loss()
        model.aniso.alpha_bar[i] = keep - h
        down = data_loss()
        model.aniso.alpha_bar[i] = keep
        assert rel_err((up - down) / (2 * h), lg.dalpha_bar[i], floor=1e-6) < 1e-5
    keep = model.aniso.phi
    model.aniso.phi = keep + h
    up = data_loss()
    model.aniso.phi = keep - h
    down = data_loss()
    model.aniso.phi = keep
    assert rel_err((up - down) / (2 * h), lg.dphi, floor=1e-6) < 1e-5
    for i in range(3):
        keep = model.aniso.p_raw[i]
        model.aniso.p_raw[i] = keep + h
        up = data_loss()
        model.aniso.p_raw[i] = keep - h
        down = data_loss()
        model.aniso.p_raw[i] = keep
        assert rel_err((up - down) / (2 * h), lg.dp_raw[i], floor=1e-6) < 1e-5

    assert time.time() - t0 < 300.0


# ---------------------------------------------------------------------------
# 3) convexity and monotonicity of the constrained network


def test_03_polyconvexity_proxies():
    """Over 1e4 random invariant points the constrained network has all
    input gradients above -1e-12, satisfies midpoint convexity, and its 8x8
    input Hessian has minimum eigenvalue above -1e-9."""
    total = 0
    for seed in (40, 41):
        rng = make_rng(seed)
        net = picnn.init_params(8, 3, width_x=24, width_y=16, depth=3, seed=seed)
        X = rng.uniform(0.2, 5.0, (5000, 8))
        Y = rng.uniform(1.0, 5.0, (5000, 3))
        total += X.shape[0]

        _, G = picnn.value_and_grad(net, X, Y)
        assert G.min() >= -1e-12

        H = picnn.hess_inputs(net, X, Y)
        eigs = np.linalg.eigvalsh(H)
        assert eigs.min() >= -1e-9

        half = X.shape[0] // 2
        X1, X2 = X[:half], X[half:]
        Ypair = Y[:half]
        f1 = picnn.value(net, X1, Ypair)
        f2 = picnn.value(net, X2, Ypair)
        fm = picnn.value(net, 0.5 * (X1 + X2), Ypair)
        assert np.all(fm <= 0.5 * (f1 + f2) + 1e-12)
    assert total == 10_000


# ---------------------------------------------------------------------------
# 4) objectivity and material symmetry


def test_04_objectivity_under_rotations():
    """stress(Q^T C Q, rotated structure) equals Q^T stress(C) Q within
    1e-9 over 1e3 random (C, Q) pairs."""
    rng = make_rng(52)
    pairs = 0
    worst = 0.0
    for k in range(10):
        aniso_class = ("iso", "transiso", "ortho")[k % 3]
        aniso = None if aniso_class == "iso" else random_aniso_state(rng)
        model = energy.new_model(2, aniso_class=aniso_class, width_x=10,
                                 width_y=8, depth=2, seed=60 + k, aniso=aniso)
        C = rand_spd(rng, 100)
        D = rng.uniform(1.0, 5.0, (100, 2))
        Q = rand_rotation(rng)
        S = energy.stress(model, C, D)
        if model.aniso is None:
            structure = None
        else:
            N1, N2, _ = model.aniso.structure()
            structure = (Q.T @ N1 @ Q, Q.T @ N2 @ Q)
        S_rot = energy.stress(model, np.einsum("ki,bkl,lj->bij", Q, C, Q), D,
                              structure=structure)
        expected = np.einsum("ki,bkl,lj->bij", Q, S, Q)
        worst = max(worst, np.max(np.abs(S_rot - expected)))
        pairs += C.shape[0]
    assert pairs == 1000
    assert worst < 1e-9


# ---------------------------------------------------------------------------
# 5) anisotropy-class discovery at desk scale


def test_05_anisotropy_class_discovery(desk_runs):
    """Discovery training classifies all three generated classes: isotropic
    data drives both activity factors below 0.05, transversely isotropic
    data leaves exactly one above 0.5, orthotropic data both, each run in
    under thirty minutes."""
    a_iso = desk_runs["iso"].model.aniso.alphas()
    assert a_iso[0] < 0.05 and a_iso[1] < 0.05, a_iso

    a_trans = desk_runs["transiso"].model.aniso.alphas()
    assert (a_trans[0] > 0.5) != (a_trans[1] > 0.5), a_trans

    a_ortho = desk_runs["ortho"].model.aniso.alphas()
    assert a_ortho[0] > 0.5 and a_ortho[1] > 0.5, a_ortho

    for res in desk_runs.values():
        assert res.wall_time < 1800.0


# ---------------------------------------------------------------------------
# 6) preferred-direction recovery


def test_06_preferred_direction_recovery(desk_runs):
    """The direction extracted from the trained transversely isotropic
    surrogate matches the generating fiber direction with |n . n_true|
    above 0.99 up to sign."""
    dirs = training.extract_directions(desk_runs["transiso"].model)
    assert len(dirs) == 1
    assert abs(dirs[0][1] @ tc.DEFAULT_N1) > 0.99


# ---------------------------------------------------------------------------
# 7) design recovery against closed-form targets


def test_07_design_recovery_from_closed_form_targets(fiber_surrogate):
    """CMA-ES through the trained surrogate recovers a seen design within
    1%, an unseen in-hull design within 5%, and a rotated fiber direction
    (1/sqrt2, 1/sqrt2, 0) with |n . n_true| above 0.99."""
    model, ds = fiber_surrogate
    n_f = ds.meta["n_f"]
    C = ds.C[:n_f]

    D_seen = np.array([3.0, 5.0])
    rows = np.where(np.all(ds.D == D_seen, axis=1))[0]
    assert rows.size == n_f
    res = inverse.invert_design(model, C, ds.S[rows], method="cma",
                                restarts=3, seed=0, max_evals=4000)
    assert np.all(np.abs(res.D - D_seen) / D_seen < 0.01), res.D

    D_new = np.array([2.2, 5.8])
    S_new = dg.Hgo(D_new[0], D_new[1], 0.0).stress(C)
    res = inverse.invert_design(model, C, S_new, method="cma",
                                restarts=3, seed=0, max_evals=4000)
    assert np.all(np.abs(res.D - D_new) / D_new < 0.05), res.D

    n1_rot = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    S_rot = dg.Hgo(D_seen[0], D_seen[1], 0.0, n1=n1_rot).stress(C)
    res = inverse.invert_design(model, C, S_rot, method="cma", restarts=5,
                                seed=0, max_evals=5000, free_orientation=True)
    assert abs(res.orientation["n1"] @ n1_rot) > 0.99


# ---------------------------------------------------------------------------
# 8) inversion with the surrogate as its own oracle


def test_08_design_recovery_from_surrogate_targets():
    """When targets come from the surrogate itself the inversion reaches an
    objective below 1e-12 and the design within 1e-4 relative."""
    rng = make_rng(71)
    model = energy.new_model(2, aniso_class="ortho", width_x=12, width_y=8,
                             depth=2, seed=72, aniso=random_aniso_state(rng))
    model.d_bounds = np.array([[1.0, 5.0], [3.0, 7.0]])
    C = rand_spd(rng, 20)
    D_true = np.array([2.7, 5.3])
    S_obs = energy.stress(model, C, np.broadcast_to(D_true, (20, 2)).copy())
    res = inverse.invert_design(model, C, S_obs, method="cma", restarts=4,
                                seed=0, max_evals=6000, f_target=1e-16)
    assert res.objective < 1e-12
    assert np.all(np.abs(res.D - D_true) / D_true < 1e-4)


# ---------------------------------------------------------------------------
# 9) optimizer benchmarks


def test_09_optimizer_benchmarks():
    """CMA-ES drives the 4-d sphere below 1e-10 in at most 5e3 evaluations
    and 2-d Rosenbrock below 1e-6 in at most 2e4; Nelder-Mead recovers a
    unit direction from its structure tensor to 1e-6."""
    def sphere(x):
        return float(x @ x)

    res = inverse.cma_es(sphere, np.array([2.0, -1.5, 0.7, 3.0]), 1.0,
                         max_evals=5000, f_target=1e-10, seed=1)
    assert res.fun <= 1e-10 and res.n_evals <= 5000

    def rosenbrock(x):
        return float(100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2)

    res = inverse.cma_es(rosenbrock, np.array([-1.2, 1.0]), 0.5,
                         max_evals=20000, f_target=1e-6, seed=2)
    assert res.fun <= 1e-6 and res.n_evals <= 20000

    n_true = np.array([0.36, -0.8, 0.48])
    n_true /= np.linalg.norm(n_true)
    n_fit, _ = inverse.fit_direction(np.outer(n_true, n_true))
    assert min(np.linalg.norm(n_fit - n_true), np.linalg.norm(n_fit + n_true)) < 1e-6


# ---------------------------------------------------------------------------
# 10) finite-element suite


def test_10_fem_patch_tangent_and_orientation_search(fiber_surrogate):
    """Single-element patch test matches the pointwise stress within 1e-6,
    the assembled tangent matches differentiated residuals within 1e-4, and
    five orientation-search restarts on the desk beam land within 2% of one
    another, all in under twenty minutes."""
    t0 = time.time()
    model, _ = fiber_surrogate
    D = np.array([3.0, 5.0])

    mesh1 = fem.box_mesh((1.0, 1.0, 1.0), (1, 1, 1))
    F0 = np.array([[1.04, 0.02, 0.0], [0.02, 0.98, 0.01], [0.0, 0.01, 1.03]])
    u_affine = mesh1.nodes @ (F0 - np.eye(3)).T
    bc_dofs = np.concatenate([3 * np.arange(8) + c for c in range(3)])
    bc_values = np.concatenate([u_affine[:, c] for c in range(3)])
    state = fem.solve_displacement(mesh1, model, D, bc_dofs, bc_values, n_steps=2)
    S_point = energy.stress(model, F0.T @ F0, D)
    assert np.max(np.abs(state.S - S_point)) < 1e-6

    quad = fem.precompute_quadrature(mesh1)
    rng = make_rng(81)
    u = 0.02 * rng.standard_normal(mesh1.n_dof)
    out = fem.assemble(mesh1, quad, model, D, u)
    h = 1e-6
    for d in rng.choice(mesh1.n_dof, size=6, replace=False):
        up, um = u.copy(), u.copy()
        up[d] += h
        um[d] -= h
        rp = fem.assemble(mesh1, quad, model, D, up, with_tangent=False).residual
        rm = fem.assemble(mesh1, quad, model, D, um, with_tangent=False).residual
        col = (rp - rm) / (2 * h)
        scale = max(np.abs(col).max(), 1e-12)
        assert np.max(np.abs(col - out.K[:, d])) / scale < 1e-4

    mesh = fem.box_mesh((4.0, 1.0, 1.0), (8, 2, 2))
    cfg = fem.FemConfig(D=D, u0=0.1, n_steps=2)
    fit = fem.invert_orientation(mesh, cfg, model, restarts=5, seed=0, max_evals=120)
    finals = np.array([f for _, f, _ in fit.restarts])
    finals = finals[np.isfinite(finals)]
    assert finals.size == 5
    assert finals.max() <= 1.02 * finals.min(), finals
    assert time.time() - t0 < 1200.0


# ---------------------------------------------------------------------------
# 11) fallback formulation modes


def test_11_fallback_modes():
    """The linear-in-C normalization makes the tangent bitwise identical
    with and without the correction term, and both fallback modes pass the
    stress-free reference check."""
    rng = make_rng(91)
    model = energy.new_model(2, mode="nonpoly_linearC", aniso_class="ortho",
                             width_x=10, width_y=8, depth=2, seed=92,
                             aniso=random_aniso_state(rng))
    C = rand_spd(rng, 8)
    D = rng.uniform(1.0, 5.0, (8, 2))
    M1 = energy.tangent(model, C, D, with_sn=True)
    M2 = energy.tangent(model, C, D, with_sn=False)
    assert np.array_equal(M1, M2)

    for mode in ("nonpoly_linearC", "unconstrained"):
        for k in range(6):
            rng_k = make_rng(95 + k)
            aniso_class = ("iso", "transiso", "ortho")[k % 3]
            aniso = None if aniso_class == "iso" else random_aniso_state(rng_k)
            m = energy.new_model(2, mode=mode, aniso_class=aniso_class,
                                 width_x=8, width_y=6, depth=2, seed=96 + k, aniso=aniso)
            D = rng_k.uniform(0.5, 5.0, (50, 2))
            C = np.broadcast_to(np.eye(3), (50, 3, 3)).copy()
            assert np.max(np.abs(energy.stress(m, C, D))) < 1e-8
            assert np.max(np.abs(energy.psi(m, C, D))) < 1e-10


# ---------------------------------------------------------------------------
# 12) sample-size study


def test_12_sample_size_study():
    """Training the isotropic desk problem at 20, 50, and 100 deformations
    per design produces full loss trajectories whose final values stay
    within a factor of two of one another (size 100 vs size 20)."""
    finals = {}
    epochs = 4000
    for size in (20, 50, 100):
        cfg = dg.DataConfig(aniso_class="iso", grid_points=3, n_f=size,
                            independent_f=True, seed=0)
        ds = dg.build_dataset(cfg)
        model = training.model_for_discovery(ds.D.shape[1], seed=0,
                                             width_x=8, width_y=6, depth=2)
        res = training.train(model, ds, training.TrainConfig(epochs=epochs, eps=DESK_EPS))
        assert len(res.history["loss"]) == epochs
        assert np.all(np.isfinite(res.history["loss"]))
        finals[size] = res.final_loss
    assert finals[100] <= 2.0 * finals[20], finals
