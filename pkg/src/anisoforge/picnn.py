"""Partially input-convex network over (invariants, design parameters).

The scalar output psi(x, y) is convex and nondecreasing in the invariant
input x for arbitrary design input y. Architecture, for hidden layers
h = 0..L-1 (default L = 3):

    y_{h+1} = softplus(Wyy_h y_h + by_h)                  (design path)
    x_{h+1} = softplus(A_h x_h + Wxy_h y_{h+1} + bx_h)    (convex path)
    psi     = w . x_L + b_out

Convexity and monotonicity in x hold when every A_h and the readout w are
elementwise nonnegative and the x-path activation is convex and
nondecreasing. In constrained mode the nonnegative weights are realized by
squaring free parameters, A_h = Wxx_h ** 2 and w = wout ** 2, so the
optimizer works on unconstrained variables. Unconstrained mode uses the raw
matrices directly and gives up the convexity guarantee.

Besides the forward value this module provides closed-form recursions for
the gradient and Hessian with respect to x and a reverse-mode accumulator
for parameter gradients of any seeded combination

    Q = sum_b  seed_val[b] * psi_b  +  seed_grad[b] . grad_x(psi)_b ,

which is exactly what fitting stresses (functions of grad_x psi) requires.
The accumulator also returns dQ/dx, the Hessian-vector product term, used
to chain into quantities the invariants depend on. Everything is verified
against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus_sigmoid(z):
    """Numerically stable (softplus(z), sigmoid(z)) sharing one exp evaluation."""
    e = np.exp(-np.abs(z))
    sp = np.log1p(e) + np.maximum(z, 0.0)
    sig = 1.0 / (1.0 + e)
    neg = z < 0
    sig[neg] = 1.0 - sig[neg]
    return sp, sig


def softplus(z):
    return softplus_sigmoid(np.asarray(z, dtype=float))[0]


def sigmoid(z):
    return softplus_sigmoid(np.asarray(z, dtype=float))[1]


@dataclass
class PicnnParams:
    """Weights and architecture of one network instance.

    weights maps names to arrays:
      Wyy{h} (wy, n_design|wy), by{h} (wy,)
      Wxx{h} (wx, n_inv|wx),   Wxy{h} (wx, wy), bx{h} (wx,)
      wout (wx,), bout (1,)
    Wxx*/wout are free parameters; constrained mode squares them on use.
    """

    n_inv: int
    n_design: int
    width_x: int = 40
    width_y: int = 30
    depth: int = 3
    constrained: bool = True
    weights: dict = field(default_factory=dict)

    def realized_xx(self, h):
        W = self.weights[f"Wxx{h}"]
        return W * W if self.constrained else W

    def realized_out(self):
        w = self.weights["wout"]
        return w * w if self.constrained else w

    def copy(self):
        return PicnnParams(
            self.n_inv,
            self.n_design,
            self.width_x,
            self.width_y,
            self.depth,
            self.constrained,
            {k: v.copy() for k, v in self.weights.items()},
        )


def init_params(n_inv, n_design, width_x=40, width_y=30, depth=3, constrained=True, seed=0):
    """Fan-in-scaled random initialization.

    Free matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); the
    nonnegativity-reparametrized ones draw raw values from
    U(0.3, 1.0)/sqrt(fan_in) so realized weights start small and positive.
    Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    w = {}
    for h in range(depth):
        in_y = n_design if h == 0 else width_y
        in_x = n_inv if h == 0 else width_x
        a = 1.0 / np.sqrt(in_y)
        w[f"Wyy{h}"] = rng.uniform(-a, a, size=(width_y, in_y))
        w[f"by{h}"] = np.zeros(width_y)
        if constrained:
            # realized weights raw^2 land in U(0.09, 1)/fan_in
            w[f"Wxx{h}"] = rng.uniform(0.3, 1.0, size=(width_x, in_x)) / np.sqrt(in_x)
        else:
            a = 1.0 / np.sqrt(in_x)
            w[f"Wxx{h}"] = rng.uniform(-a, a, size=(width_x, in_x))
        a = 1.0 / np.sqrt(width_y)
        w[f"Wxy{h}"] = rng.uniform(-a, a, size=(width_x, width_y))
        w[f"bx{h}"] = np.zeros(width_x)
    if constrained:
        w["wout"] = rng.uniform(0.3, 1.0, size=width_x) / np.sqrt(width_x)
    else:
        a = 1.0 / np.sqrt(width_x)
        w["wout"] = rng.uniform(-a, a, size=width_x)
    w["bout"] = np.zeros(1)
    return PicnnParams(n_inv, n_design, width_x, width_y, depth, constrained, w)


def _check_inputs(params, X, Y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != params.n_inv:
        raise ValueError(f"invariant input width {X.shape[1]} != {params.n_inv}")
    if Y.shape[1] != params.n_design:
        raise ValueError(f"design input width {Y.shape[1]} != {params.n_design}")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("batch sizes of invariant and design inputs differ")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("non-finite network input")
    return X, Y


class _Cache:
    __slots__ = ("X", "Y", "Xs", "Ys", "us", "su", "zs", "sz", "A", "w", "psi", "d", "s", "g")


def _forward(params, X, Y):
    c = _Cache()
    c.X, c.Y = X, Y
    L = params.depth
    c.A = [params.realized_xx(h) for h in range(L)]
    c.w = params.realized_out()
    c.Ys, c.us, c.su = [Y], [], []
    for h in range(L):
        u = c.Ys[h] @ params.weights[f"Wyy{h}"].T + params.weights[f"by{h}"]
        sp, sig = softplus_sigmoid(u)
        c.us.append(u)
        c.su.append(sig)
        c.Ys.append(sp)
    c.Xs, c.zs, c.sz = [X], [], []
    for h in range(L):
        z = c.Xs[h] @ c.A[h].T + c.Ys[h + 1] @ params.weights[f"Wxy{h}"].T + params.weights[f"bx{h}"]
        sp, sig = softplus_sigmoid(z)
        c.zs.append(z)
        c.sz.append(sig)
        c.Xs.append(sp)
    c.psi = c.Xs[L] @ c.w + params.weights["bout"][0]
    return c


def _grad_pass(params, c):
    L = params.depth
    B = c.X.shape[0]
    c.d = [None] * (L + 1)
    c.s = [None] * L
    c.d[L] = np.broadcast_to(c.w, (B, c.w.size))
    for h in range(L - 1, -1, -1):
        c.s[h] = c.sz[h] * c.d[h + 1]
        c.d[h] = c.s[h] @ c.A[h]
    c.g = c.d[0]
    return c


def value(params, X, Y):
    """psi for a batch: returns (B,) array."""
    X, Y = _check_inputs(params, X, Y)
    return _forward(params, X, Y).psi


def value_and_grad(params, X, Y, return_cache=False):
    """psi and d psi / dx for a batch: ((B,), (B, n_inv))."""
    X, Y = _check_inputs(params, X, Y)
    c = _grad_pass(params, _forward(params, X, Y))
    if return_cache:
        return c.psi, c.g, c
    return c.psi, c.g


def hess_inputs(params, X, Y):
    """d^2 psi / dx dx for a batch: (B, n_inv, n_inv), symmetric.

    Backward curvature recursion through the x path: with sp' and sp''
    evaluated at the pre-activations z_h,

        M_L = 0,  delta_L = w
        Mz  = sp' (x) sp' * M_{h+1} + diag(delta_{h+1} * sp'')
        M_h = A_h^T Mz A_h,  delta_h = (sp' * delta_{h+1}) A_h
    """
    X, Y = _check_inputs(params, X, Y)
    c = _forward(params, X, Y)
    L = params.depth
    B = X.shape[0]
    delta = np.broadcast_to(c.w, (B, c.w.size)).copy()
    M = np.zeros((B, c.w.size, c.w.size))
    for h in range(L - 1, -1, -1):
        sp1 = c.sz[h]
        sp2 = sp1 * (1.0 - sp1)
        Mz = sp1[:, :, None] * M * sp1[:, None, :]
        diag = delta * sp2
        idx = np.arange(c.zs[h].shape[1])
        Mz[:, idx, idx] += diag
        M = np.matmul(np.matmul(c.A[h].T, Mz), c.A[h])
        delta = (sp1 * delta) @ c.A[h]
    return M


def backprop(params, X, Y, seed_val=None, seed_grad=None, cache=None):
    """Reverse-mode gradients of Q = sum seed_val*psi + sum seed_grad.grad_x psi.

    Returns (dtheta, dX): dtheta maps weight names to gradient arrays with
    respect to the *free* parameters (squaring reparametrization included);
    dX is dQ/dx per batch row, i.e. seed_val*grad + Hessian @ seed_grad.

    A cache from value_and_grad(..., return_cache=True) on the same inputs
    may be passed to skip recomputing the forward and gradient passes.
    """
    X, Y = _check_inputs(params, X, Y)
    L = params.depth
    B = X.shape[0]
    if cache is None:
        cache = _forward(params, X, Y)
        if seed_grad is not None:
            _grad_pass(params, cache)
    c = cache
    dA = [np.zeros_like(c.A[h]) for h in range(L)]
    dWxy = [np.zeros_like(params.weights[f"Wxy{h}"]) for h in range(L)]
    dbx = [np.zeros(params.width_x) for _ in range(L)]
    dz = [np.zeros((B, params.width_x)) for _ in range(L)]
    dXs = [np.zeros_like(c.Xs[h]) for h in range(L + 1)]
    dYs = [np.zeros_like(c.Ys[h]) for h in range(L + 1)]
    dw = np.zeros_like(c.w)
    dbout = 0.0

    if seed_grad is not None:
        # unwind the gradient recursion d_h = (sp'(z_h) * d_{h+1}) A_h
        dd = np.asarray(seed_grad, dtype=float)
        for h in range(L):
            sp1 = c.sz[h]
            ds = dd @ c.A[h].T
            dA[h] += c.s[h].T @ dd
            dz[h] += sp1 * (1.0 - sp1) * c.d[h + 1] * ds
            dd = sp1 * ds
        dw += dd.sum(axis=0)

    if seed_val is not None:
        sv = np.asarray(seed_val, dtype=float)
        dXs[L] += sv[:, None] * c.w[None, :]
        dw += sv @ c.Xs[L]
        dbout += sv.sum()

    for h in range(L - 1, -1, -1):
        dz_h = dz[h] + c.sz[h] * dXs[h + 1]
        dA[h] += dz_h.T @ c.Xs[h]
        dXs[h] += dz_h @ c.A[h]
        dWxy[h] += dz_h.T @ c.Ys[h + 1]
        dYs[h + 1] += dz_h @ params.weights[f"Wxy{h}"]
        dbx[h] += dz_h.sum(axis=0)

    dtheta = {}
    for h in range(L - 1, -1, -1):
        du = c.su[h] * dYs[h + 1]
        dtheta[f"Wyy{h}"] = du.T @ c.Ys[h]
        dtheta[f"by{h}"] = du.sum(axis=0)
        dYs[h] += du @ params.weights[f"Wyy{h}"]

    for h in range(L):
        if params.constrained:
            dtheta[f"Wxx{h}"] = 2.0 * params.weights[f"Wxx{h}"] * dA[h]
        else:
            dtheta[f"Wxx{h}"] = dA[h]
        dtheta[f"Wxy{h}"] = dWxy[h]
        dtheta[f"bx{h}"] = dbx[h]
    if params.constrained:
        dtheta["wout"] = 2.0 * params.weights["wout"] * dw
    else:
        dtheta["wout"] = dw
    dtheta["bout"] = np.array([dbout])
    return dtheta, dXs[0]


@dataclass
class EvalRecord:
    """Bundled pointwise evaluation of the network."""

    value: float
    grad: np.ndarray
    hess: np.ndarray


def evaluate_record(params, x, y):
    """Value, input gradient and input Hessian at a single (x, y) point."""
    psi, g = value_and_grad(params, x, y)
    H = hess_inputs(params, x, y)
    return EvalRecord(float(psi[0]), g[0], H[0])


def flatten(params):
    """Concatenate all weights into one vector (sorted key order); returns (vec, unflatten)."""
    keys = sorted(params.weights.keys())
    vec = np.concatenate([params.weights[k].ravel() for k in keys])

    def unflatten(v):
        out = params.copy()
        off = 0
        for k in keys:
            n = params.weights[k].size
            out.weights[k] = v[off : off + n].reshape(params.weights[k].shape).copy()
            off += n
        return out

    return vec, unflatten


def flatten_grads(params, dtheta):
    keys = sorted(params.weights.keys())
    return np.concatenate([np.asarray(dtheta[k]).ravel() for k in keys])
