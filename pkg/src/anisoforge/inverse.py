"""Design and orientation recovery by derivative-free minimization.

The surrogate is cheap to evaluate but its gradients with respect to the
design inputs are not exposed, so inversion runs on function values only:
a covariance-matrix-adaptation evolution strategy (CMA-ES) as the default
global method and Nelder-Mead for cheap local polishing. Both handle box
bounds by repairing samples onto the box and penalizing the repair
distance, and both treat non-finite objective values as +inf.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import energy
from . import tensor_core as tc


def _as_bounds(bounds, n):
    b = np.asarray(bounds, dtype=float)
    if b.shape != (n, 2) or np.any(b[:, 0] > b[:, 1]):
        raise ValueError(f"bounds must be ({n}, 2) with lo <= hi")
    return b


def _repair_and_penalize(f, bounds):
    """Wrap f: evaluate at the clamped point plus a scaled repair penalty."""
    if bounds is None:
        def wrapped(x):
            v = f(x)
            return float(v) if np.isfinite(v) else np.inf
        return wrapped
    lo, hi = bounds[:, 0], bounds[:, 1]
    width = np.maximum(hi - lo, 1e-12)

    def wrapped(x):
        xc = np.clip(x, lo, hi)
        v = f(xc)
        if not np.isfinite(v):
            return np.inf
        return float(v) + 1e3 * float(np.sum(((x - xc) / width) ** 2))

    return wrapped


# ---------------------------------------------------------------------------
# CMA-ES


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    n_evals: int
    n_iters: int
    stop: str
    history: list = field(default_factory=list)  # (evals, best f) per iteration


def cma_es(f, x0, sigma0, bounds=None, max_evals=20000, f_target=None,
           popsize=None, seed=0, tol_x=1e-14, tol_stagnation=200):
    """(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance updates.

    Stops on max_evals, f <= f_target, step collapse (sigma times the largest
    covariance scale below tol_x), or tol_stagnation iterations without
    improvement of the best value.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if bounds is not None:
        bounds = _as_bounds(bounds, n)
    obj = _repair_and_penalize(f, bounds)
    rng = np.random.default_rng(seed)

    lam = popsize if popsize is not None else 4 + int(3 * np.log(n))
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mu_eff = 1.0 / np.sum(w**2)

    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    chi_n = np.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))

    mean = x0.copy()
    sigma = float(sigma0)
    C = np.eye(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)
    best_x, best_f = mean.copy(), np.inf
    n_evals = 0
    history = []
    stop = "max_evals"
    last_improvement = 0

    for it in range(1, max_evals // lam + 1):
        d2, B = np.linalg.eigh(C)
        d = np.sqrt(np.maximum(d2, 1e-14))
        Z = rng.standard_normal((lam, n))
        Y = Z * d[None, :] @ B.T
        X = mean[None, :] + sigma * Y
        fs = np.array([obj(x) for x in X])
        n_evals += lam
        if it == 1 and not np.any(np.isfinite(fs)):
            raise RuntimeError("objective returned no finite values in the first generation")

        order = np.argsort(fs)
        if fs[order[0]] < best_f:
            best_f = fs[order[0]]
            best_x = np.clip(X[order[0]], bounds[:, 0], bounds[:, 1]) if bounds is not None else X[order[0]].copy()
            last_improvement = it
        history.append((n_evals, best_f))

        y_sel = Y[order[:mu]]
        y_w = w @ y_sel
        mean = mean + sigma * y_w

        inv_sqrt = B * (1.0 / d)[None, :] @ B.T
        p_sigma = (1.0 - c_sigma) * p_sigma + np.sqrt(c_sigma * (2.0 - c_sigma) * mu_eff) * (inv_sqrt @ y_w)
        h_sig = (
            np.linalg.norm(p_sigma) / np.sqrt(1.0 - (1.0 - c_sigma) ** (2 * it))
            < (1.4 + 2.0 / (n + 1.0)) * chi_n
        )
        p_c = (1.0 - c_c) * p_c + h_sig * np.sqrt(c_c * (2.0 - c_c) * mu_eff) * y_w

        rank_mu = (y_sel * w[:, None]).T @ y_sel
        C = (
            (1.0 - c_1 - c_mu) * C
            + c_1 * (np.outer(p_c, p_c) + (1.0 - h_sig) * c_c * (2.0 - c_c) * C)
            + c_mu * rank_mu
        )
        C = 0.5 * (C + C.T)
        sigma *= np.exp((c_sigma / d_sigma) * (np.linalg.norm(p_sigma) / chi_n - 1.0))

        if f_target is not None and best_f <= f_target:
            stop = "f_target"
            break
        if sigma * d.max() < tol_x:
            stop = "tol_x"
            break
        if it - last_improvement >= tol_stagnation:
            stop = "stagnation"
            break

    return OptimizeResult(best_x, best_f, n_evals, len(history), stop, history)


# ---------------------------------------------------------------------------
# Nelder-Mead


def nelder_mead(f, x0, step=0.1, bounds=None, max_evals=10000, f_target=None, tol=1e-10,
                reflection=1.0, expansion=2.0, contraction=0.5, shrink=0.5):
    """Downhill simplex, defaulting to the standard (1, 2, 0.5, 0.5) coefficients.

    Stops when the simplex diameter falls below tol, f reaches f_target, or
    the evaluation budget runs out. step sets the initial simplex edge per
    coordinate (scalar or vector).
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if bounds is not None:
        bounds = _as_bounds(bounds, n)
    obj = _repair_and_penalize(f, bounds)
    step = np.broadcast_to(np.asarray(step, dtype=float), (n,))

    simplex = np.vstack([x0] + [x0 + step[i] * np.eye(n)[i] for i in range(n)])
    fs = np.array([obj(x) for x in simplex])
    n_evals = n + 1
    if not np.any(np.isfinite(fs)):
        raise RuntimeError("objective returned no finite values on the initial simplex")
    history = []
    stop = "max_evals"

    while n_evals < max_evals:
        order = np.argsort(fs)
        simplex, fs = simplex[order], fs[order]
        history.append((n_evals, fs[0]))
        if f_target is not None and fs[0] <= f_target:
            stop = "f_target"
            break
        diameter = np.max(np.linalg.norm(simplex[1:] - simplex[0], axis=1))
        if diameter < tol:
            stop = "tol"
            break

        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + reflection * (centroid - simplex[-1])
        fr = obj(xr)
        n_evals += 1
        if fr < fs[0]:
            xe = centroid + expansion * (centroid - simplex[-1])
            fe = obj(xe)
            n_evals += 1
            simplex[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
        else:
            inside = fr >= fs[-1]
            xc = centroid + contraction * ((simplex[-1] if inside else xr) - centroid)
            fc = obj(xc)
            n_evals += 1
            if fc < min(fr, fs[-1]):
                simplex[-1], fs[-1] = xc, fc
            else:
                simplex[1:] = simplex[0] + shrink * (simplex[1:] - simplex[0])
                fs[1:] = [obj(x) for x in simplex[1:]]
                n_evals += n

    order = np.argsort(fs)
    best = simplex[order[0]]
    if bounds is not None:
        best = np.clip(best, bounds[:, 0], bounds[:, 1])
    return OptimizeResult(best, fs[order[0]], n_evals, len(history), stop, history)


def fit_direction(N_target, x0=(1.0, 0.0, 0.0), tol=1e-12, max_evals=5000):
    """Unit direction whose structure tensor best matches N_target.

    Minimizes ||n(x) (x) n(x) - N_target||_F^2 over unnormalized coordinates
    with Nelder-Mead; the objective is invariant under n -> -n, so the
    returned direction is determined up to sign.
    """
    N_target = np.asarray(N_target, dtype=float)

    def objective(x):
        norm = np.linalg.norm(x)
        if norm < 1e-12:
            return np.inf
        n = x / norm
        return float(np.sum((np.outer(n, n) - N_target) ** 2))

    res = nelder_mead(objective, np.asarray(x0, dtype=float), step=0.1, tol=tol,
                      max_evals=max_evals)
    return res.x / np.linalg.norm(res.x), res


# ---------------------------------------------------------------------------
# design inversion against observed stresses


@dataclass
class InversionResult:
    D: np.ndarray
    objective: float
    n_evals: int
    restarts: list  # per-restart (x, f, stop)
    orientation: dict | None = None  # phi, axis, directions when fitted

    def report(self):
        out = {
            "design": self.D.tolist(),
            "objective": self.objective,
            "n_evals": self.n_evals,
            "restarts": [
                {"x": x.tolist(), "objective": f, "stop": stop} for x, f, stop in self.restarts
            ],
        }
        if self.orientation is not None:
            out["orientation"] = {
                "phi": self.orientation["phi"],
                "axis": self.orientation["axis"].tolist(),
                "n1": self.orientation["n1"].tolist(),
                "n2": self.orientation["n2"].tolist(),
            }
        return out


def stress_mismatch(model, C, S_obs, D, structure=None):
    """Mean squared Frobenius residual of the surrogate stress on (C, S) pairs."""
    D_rows = np.broadcast_to(np.asarray(D, dtype=float), (C.shape[0], np.size(D)))
    S_hat = energy.stress(model, C, D_rows.copy(), structure=structure)
    res = S_hat - S_obs
    return float(np.mean(np.einsum("bij,bij->b", res, res)))


def _orientation_bounds():
    return np.array([[0.0, np.pi], [-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]])


def invert_design(model, C, S_obs, d_bounds=None, method="cma", restarts=5, seed=0,
                  free_orientation=False, max_evals=6000, f_target=None, trace_path=None,
                  sigma0=None, options=None):
    """Recover the design vector (and optionally the orientation) from stresses.

    Minimizes the mean squared stress residual over the design box with
    multiple restarts: the first from the box center, the rest from seeded
    uniform draws. With free_orientation the search space grows by axis-angle
    coordinates (phi, p_raw) and the result reports the fitted directions.
    sigma0 defaults to 0.3 times the widest bound; options holds extra
    keyword arguments for the chosen optimizer (popsize, tol_x, simplex
    coefficients, ...).
    """
    import warnings

    C = np.asarray(C, dtype=float)
    S_obs = np.asarray(S_obs, dtype=float)
    m = model.net.n_design
    if d_bounds is None:
        if model.d_bounds is None:
            raise ValueError("no design bounds: pass d_bounds or train the model first")
        d_bounds = model.d_bounds
    d_bounds = _as_bounds(d_bounds, m)
    fit_orientation = free_orientation and model.config.aniso_class != "iso"
    bounds = np.vstack([d_bounds, _orientation_bounds()]) if fit_orientation else d_bounds

    def objective(x):
        structure = None
        if fit_orientation:
            try:
                structure = tc.structure_tensors(x[m], x[m + 1 : m + 4])
            except (ValueError, ZeroDivisionError):
                return np.inf
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                return stress_mismatch(model, C, S_obs, x[:m], structure=structure)
            except (ValueError, FloatingPointError, np.linalg.LinAlgError):
                return np.inf

    rng = np.random.default_rng(seed)
    starts = [bounds.mean(axis=1)]
    for _ in range(restarts - 1):
        starts.append(bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.random(bounds.shape[0]))

    trace_writer, trace_file = _open_trace(trace_path)
    opts = dict(options or {})
    step = opts.pop("step", None)
    best = None
    summaries = []
    total_evals = 0
    try:
        for k, x0 in enumerate(starts):
            if method == "cma":
                s0 = sigma0 if sigma0 is not None else 0.3 * float(np.max(bounds[:, 1] - bounds[:, 0]))
                res = cma_es(objective, x0, s0, bounds=bounds, max_evals=max_evals,
                             f_target=f_target, seed=seed + 101 * k, **opts)
            elif method == "nelder-mead":
                res = nelder_mead(objective, x0,
                                  step=0.25 * (bounds[:, 1] - bounds[:, 0]) if step is None else step,
                                  bounds=bounds, max_evals=max_evals, f_target=f_target, **opts)
            else:
                raise ValueError(f"unknown method {method!r}")
            total_evals += res.n_evals
            summaries.append((res.x, res.fun, res.stop))
            if trace_writer is not None:
                for evals, fval in res.history:
                    trace_writer.writerow([k, evals, f"{fval:.10e}"])
            if best is None or res.fun < best.fun:
                best = res
            if f_target is not None and best.fun <= f_target:
                break
    finally:
        if trace_file is not None:
            trace_file.close()

    orientation = None
    if fit_orientation:
        phi, p_raw = best.x[m], best.x[m + 1 : m + 4]
        N1, N2, R = tc.structure_tensors(phi, p_raw)
        orientation = {
            "phi": float(phi),
            "axis": p_raw / np.linalg.norm(p_raw),
            "n1": R[:, 0],
            "n2": R[:, 1],
        }
    return InversionResult(best.x[:m].copy(), best.fun, total_evals, summaries, orientation)


def _open_trace(trace_path):
    if trace_path is None:
        return None, None
    path = Path(trace_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    f = open(path, "w", newline="")
    writer = csv.writer(f)
    writer.writerow(["restart", "evals", "best_objective"])
    return writer, f
