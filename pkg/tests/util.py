"""Shared helpers for the test suite: random tensors and finite differences."""

import numpy as np

from anisoforge import tensor_core as tc


def rand_spd(rng, n=None, spread=0.3):
    """Random SPD right Cauchy-Green tensors C = F^T F with F = I + spread*E."""
    shape = (3, 3) if n is None else (n, 3, 3)
    while True:
        F = np.eye(3) + spread * rng.uniform(-1.0, 1.0, size=shape)
        det = np.linalg.det(F)
        if np.all(det > 0.3):
            break
    return np.einsum("...ki,...kj->...ij", F, F)


def rand_rotation(rng, n=None):
    """Haar-ish random rotations via QR of a Gaussian matrix."""
    shape = (3, 3) if n is None else (n, 3, 3)
    A = rng.standard_normal(shape)
    Q, R = np.linalg.qr(A)
    sign = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    Q = Q * sign[..., None, :]
    det = np.linalg.det(Q)
    Q[..., :, 0] = Q[..., :, 0] * det[..., None]
    return Q


def fd_grad_wrt_C(f, C, h=1e-6):
    """Central-difference gradient of scalar f(C) wrt symmetric C, full (3,3)."""
    g = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            Cp, Cm = C.copy(), C.copy()
            Cp[i, j] += h
            Cm[i, j] -= h
            if i != j:
                Cp[j, i] += h
                Cm[j, i] -= h
            d = (f(Cp) - f(Cm)) / (2.0 * h)
            # symmetric-pair perturbation returns 2*g_ij off-diagonal
            g[i, j] = g[j, i] = d / (2.0 if i != j else 1.0)
    return g


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of vector-valued f at x (1-D)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros(f0.shape + x.shape)
    for k in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        J[..., k] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return J


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def default_structure_tensors():
    N1 = np.outer(tc.DEFAULT_N1, tc.DEFAULT_N1)
    N2 = np.outer(tc.DEFAULT_N2, tc.DEFAULT_N2)
    return N1, N2
