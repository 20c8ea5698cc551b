"""Kernels for symmetric 3x3 tensors, rotations and anisotropic invariants.

Conventions used throughout the package:

* Symmetric second-order tensors are stored either as full ``(..., 3, 3)``
  arrays or packed 6-vectors in component order ``(11, 22, 33, 12, 13, 23)``.
  Double contraction of packed vectors carries factor-2 weights on the three
  shear entries.
* Fourth-order tensors with minor symmetries are stored as 6x6 matrices of
  raw tensor components in the same ordering (no shear scaling baked in).
  ``apply_tangent`` supplies the contraction weights.
* The right Cauchy-Green tensor is ``C = F^T F``; ``J = sqrt(det C)``.
* Structure tensors are ``N_i = n_i (x) n_i`` for unit preferred directions
  ``n_i``; the two directions are columns 1 and 2 of a rotation built from
  axis-angle parameters ``(phi, p)``.

The invariant set is, with activity factors ``a1, a2`` in (0, 1]:

    I1 = tr C                 I5 = a1 tr(C N1)      I7 = a2 tr(C N2)
    I2 = tr(cof C)            I6 = a1 tr(cof(C) N1) I8 = a2 tr(cof(C) N2)
    I3 = J
    I4 = -2 J

All derivative formulas below are with respect to C and are exercised by
finite-difference checks in the test suite.
"""

from __future__ import annotations

import numpy as np

VOIGT = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
VOIGT_WEIGHTS = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
EYE3 = np.eye(3)

# Default preferred directions used by data generation and known-direction
# training runs: an orthonormal in-plane pair.
DEFAULT_N1 = np.array([1.0 / np.sqrt(3.0), np.sqrt(2.0 / 3.0), 0.0])
DEFAULT_N2 = np.array([np.sqrt(2.0 / 3.0), -1.0 / np.sqrt(3.0), 0.0])

_DEBUG_CHECKS = False


def set_debug_checks(flag):
    """Enable cross-checks of the componentwise kernels against numpy.linalg."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def sym_to_6(T):
    """Pack a symmetric (..., 3, 3) tensor into (...,6) component order (11,22,33,12,13,23)."""
    T = np.asarray(T)
    return np.stack(
        [T[..., 0, 0], T[..., 1, 1], T[..., 2, 2], T[..., 0, 1], T[..., 0, 2], T[..., 1, 2]],
        axis=-1,
    )


def sym_from_6(v):
    """Unpack a (..., 6) component vector into a full symmetric (..., 3, 3) tensor."""
    v = np.asarray(v)
    out = np.empty(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 0] = v[..., 0]
    out[..., 1, 1] = v[..., 1]
    out[..., 2, 2] = v[..., 2]
    out[..., 0, 1] = out[..., 1, 0] = v[..., 3]
    out[..., 0, 2] = out[..., 2, 0] = v[..., 4]
    out[..., 1, 2] = out[..., 2, 1] = v[..., 5]
    return out


def cofactor_sym(C):
    """Cofactor matrix of a symmetric (..., 3, 3) tensor via 2x2 minors.

    For symmetric input the cofactor matrix equals the adjugate and is itself
    symmetric. Written componentwise so it stays finite and accurate for
    near-singular input, where forming det(C) * inv(C) would not.
    """
    C = np.asarray(C)
    c00, c11, c22 = C[..., 0, 0], C[..., 1, 1], C[..., 2, 2]
    c01, c02, c12 = C[..., 0, 1], C[..., 0, 2], C[..., 1, 2]
    out = np.empty_like(C)
    out[..., 0, 0] = c11 * c22 - c12 * c12
    out[..., 1, 1] = c00 * c22 - c02 * c02
    out[..., 2, 2] = c00 * c11 - c01 * c01
    out[..., 0, 1] = out[..., 1, 0] = c02 * c12 - c01 * c22
    out[..., 0, 2] = out[..., 2, 0] = c01 * c12 - c02 * c11
    out[..., 1, 2] = out[..., 2, 1] = c01 * c02 - c00 * c12
    if _DEBUG_CHECKS:
        ref = np.linalg.det(C)[..., None, None] * np.linalg.inv(C).swapaxes(-1, -2)
        if not np.allclose(out, ref, rtol=1e-9, atol=1e-12):
            raise AssertionError("cofactor kernel disagrees with det*inv^T cross-check")
    return out


def det_sym(C):
    """Determinant of a symmetric (..., 3, 3) tensor, expanded along the first row."""
    C = np.asarray(C)
    cof = cofactor_sym(C)
    return (
        C[..., 0, 0] * cof[..., 0, 0]
        + C[..., 0, 1] * cof[..., 0, 1]
        + C[..., 0, 2] * cof[..., 0, 2]
    )


def inv_sym(C):
    """Inverse of a symmetric (..., 3, 3) tensor from its cofactors."""
    cof = cofactor_sym(C)
    det = (
        np.asarray(C)[..., 0, 0] * cof[..., 0, 0]
        + np.asarray(C)[..., 0, 1] * cof[..., 0, 1]
        + np.asarray(C)[..., 0, 2] * cof[..., 0, 2]
    )
    return cof / det[..., None, None]


def is_spd(C, tol=0.0):
    """True when symmetric C is positive definite (checked by leading minors)."""
    C = np.asarray(C, dtype=float)
    m1 = C[..., 0, 0]
    m2 = C[..., 0, 0] * C[..., 1, 1] - C[..., 0, 1] ** 2
    m3 = det_sym(C)
    return (m1 > tol) & (m2 > tol) & (m3 > tol)


def check_metric(C, name="C"):
    """Validate a right Cauchy-Green tensor: symmetric, finite, positive definite."""
    C = np.asarray(C, dtype=float)
    if C.shape[-2:] != (3, 3):
        raise ValueError(f"{name} must have shape (..., 3, 3), got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError(f"{name} contains non-finite entries")
    if not np.allclose(C, C.swapaxes(-1, -2), atol=1e-10):
        raise ValueError(f"{name} is not symmetric")
    if not np.all(is_spd(C)):
        raise ValueError(f"{name} is not positive definite (invalid metric)")
    return C


def cross_matrix(p):
    """Cross-product matrix [p]_x with [p]_x v = p x v."""
    p = np.asarray(p, dtype=float)
    return np.array(
        [
            [0.0, -p[2], p[1]],
            [p[2], 0.0, -p[0]],
            [-p[1], p[0], 0.0],
        ]
    )


def rotation_from_axis_angle(phi, p):
    """Rodrigues rotation about unit axis p by angle phi.

    R = I + sin(phi) P + (1 - cos(phi)) P^2 with P = [p]_x, so that a
    quarter turn about e3 maps e1 -> e2 and e2 -> -e1. The axis is
    normalized defensively; a zero axis is rejected.
    """
    p = np.asarray(p, dtype=float)
    norm = np.linalg.norm(p)
    if not np.isfinite(norm) or norm < 1e-12:
        raise ValueError("rotation axis must be a nonzero finite vector")
    P = cross_matrix(p / norm)
    return EYE3 + np.sin(phi) * P + (1.0 - np.cos(phi)) * (P @ P)


def axis_angle_from_rotation(R):
    """Inverse of rotation_from_axis_angle: extract (phi, p) with phi in [0, pi].

    For phi ~ 0 the axis is arbitrary and e3 is returned; for phi ~ pi the
    axis is recovered from the symmetric part. Round-trips through
    rotation_from_axis_angle to 1e-10 away from those edge cases.
    """
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    phi = float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))
    if phi < 1e-8:
        return 0.0, np.array([0.0, 0.0, 1.0])
    if np.pi - phi > 1e-6:
        p = np.array(
            [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
        ) / (2.0 * np.sin(phi))
        return phi, p / np.linalg.norm(p)
    # phi ~ pi: R ~ 2 p p^T - I, read the axis off the diagonal
    d = np.clip((np.diag(R) + 1.0) / 2.0, 0.0, None)
    k = int(np.argmax(d))
    p = np.sqrt(d)
    # fix signs from the off-diagonal products p_i p_j = (R_ij + R_ji)/4
    for j in range(3):
        if j != k and (R[k, j] + R[j, k]) < 0.0:
            p[j] = -p[j]
    if p[k] < 0.0:
        p = -p
    return phi, p / np.linalg.norm(p)


def rotation_from_direction_pair(n1, n2):
    """Rotation whose first two columns are the orthonormal pair (n1, n2)."""
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    n1 = n1 / np.linalg.norm(n1)
    n2 = n2 / np.linalg.norm(n2)
    if abs(float(n1 @ n2)) > 1e-8:
        raise ValueError("preferred directions must be orthogonal")
    return np.column_stack([n1, n2, np.cross(n1, n2)])


def structure_tensors(phi, p_raw):
    """Structure tensors N1, N2 from axis-angle parameters.

    The (possibly unnormalized) axis p_raw is normalized, the rotation
    R(phi, p) is formed, and N_i = r_i r_i^T for r_i = R e_i, i = 1, 2.
    Returns (N1, N2, R).
    """
    R = rotation_from_axis_angle(phi, p_raw)
    r1, r2 = R[:, 0], R[:, 1]
    return np.outer(r1, r1), np.outer(r2, r2), R


def invariants(C, N1=None, N2=None, alpha1=1.0, alpha2=1.0, n_active=8):
    """Invariant vector of C for a given anisotropy configuration.

    Parameters
    ----------
    C : (..., 3, 3) symmetric positive definite.
    N1, N2 : (3, 3) structure tensors; required when n_active > 4.
    alpha1, alpha2 : activity factors scaling the anisotropic entries.
    n_active : 4 (isotropic), 6 (transversely isotropic) or 8 (orthotropic).

    Returns
    -------
    (..., n_active) array (I1, I2, I3, I4[, I5, I6[, I7, I8]]).
    """
    C = np.asarray(C, dtype=float)
    cof = cofactor_sym(C)
    det = (
        C[..., 0, 0] * cof[..., 0, 0]
        + C[..., 0, 1] * cof[..., 0, 1]
        + C[..., 0, 2] * cof[..., 0, 2]
    )
    J = np.sqrt(det)
    I1 = C[..., 0, 0] + C[..., 1, 1] + C[..., 2, 2]
    I2 = cof[..., 0, 0] + cof[..., 1, 1] + cof[..., 2, 2]
    cols = [I1, I2, J, -2.0 * J]
    if n_active >= 6:
        cols.append(alpha1 * np.einsum("...ij,ij->...", C, N1))
        cols.append(alpha1 * np.einsum("...ij,ij->...", cof, N1))
    if n_active == 8:
        cols.append(alpha2 * np.einsum("...ij,ij->...", C, N2))
        cols.append(alpha2 * np.einsum("...ij,ij->...", cof, N2))
    return np.stack(cols, axis=-1)


def reference_invariants(alpha1=1.0, alpha2=1.0, n_active=8):
    """Invariant vector evaluated at C = I (structure tensors have unit trace)."""
    base = [3.0, 3.0, 1.0, -2.0]
    if n_active >= 6:
        base += [alpha1, alpha1]
    if n_active == 8:
        base += [alpha2, alpha2]
    return np.array(base)


def invariant_bases(C, N1=None, N2=None, alpha1=1.0, alpha2=1.0, n_active=8):
    """First derivatives B_i = dI_i/dC as an (..., n_active, 3, 3) stack.

        B1 = I
        B2 = tr(C) I - C
        B3 = (J/2) C^-1
        B4 = -J C^-1
        B5 = a1 N1
        B6 = a1 det(C) [tr(C^-1 N1) C^-1 - C^-1 N1 C^-1]
        B7, B8 : as B5, B6 with (a2, N2)

    The anisotropic entries are symmetric by construction and symmetrized
    once more to shed roundoff asymmetry.
    """
    C = np.asarray(C, dtype=float)
    shp = C.shape[:-2]
    cof = cofactor_sym(C)
    det = (
        C[..., 0, 0] * cof[..., 0, 0]
        + C[..., 0, 1] * cof[..., 0, 1]
        + C[..., 0, 2] * cof[..., 0, 2]
    )
    J = np.sqrt(det)
    Cinv = cof / det[..., None, None]
    I1 = C[..., 0, 0] + C[..., 1, 1] + C[..., 2, 2]
    eye = np.broadcast_to(EYE3, shp + (3, 3))
    out = np.empty(shp + (n_active, 3, 3))
    out[..., 0, :, :] = eye
    out[..., 1, :, :] = I1[..., None, None] * eye - C
    out[..., 2, :, :] = 0.5 * J[..., None, None] * Cinv
    out[..., 3, :, :] = -J[..., None, None] * Cinv
    if n_active >= 6:
        out[..., 4, :, :] = alpha1 * np.broadcast_to(N1, shp + (3, 3))
        out[..., 5, :, :] = _aniso_cof_basis(Cinv, det, N1, alpha1)
    if n_active == 8:
        out[..., 6, :, :] = alpha2 * np.broadcast_to(N2, shp + (3, 3))
        out[..., 7, :, :] = _aniso_cof_basis(Cinv, det, N2, alpha2)
    return out


def _aniso_cof_basis(Cinv, det, N, alpha):
    M = np.einsum("...ij,jk,...kl->...il", Cinv, N, Cinv)
    n = np.einsum("...ij,ij->...", Cinv, N)
    B = det[..., None, None] * (n[..., None, None] * Cinv - M)
    return alpha * 0.5 * (B + B.swapaxes(-1, -2))


def reference_bases(N1=None, N2=None, alpha1=1.0, alpha2=1.0, n_active=8):
    """B_i at C = I: {I, 2I, I/2, -I, a1 N1, a1 (tr(N1) I - N1), a2 N2, a2 (tr(N2) I - N2)}."""
    out = np.empty((n_active, 3, 3))
    out[0] = EYE3
    out[1] = 2.0 * EYE3
    out[2] = 0.5 * EYE3
    out[3] = -EYE3
    if n_active >= 6:
        out[4] = alpha1 * N1
        out[5] = alpha1 * (np.trace(N1) * EYE3 - N1)
    if n_active == 8:
        out[6] = alpha2 * N2
        out[7] = alpha2 * (np.trace(N2) * EYE3 - N2)
    return out


def invariant_second_derivatives(C, N1=None, N2=None, alpha1=1.0, alpha2=1.0, n_active=8):
    """Second derivatives d^2 I_i / dC dC as an (..., n_active, 3, 3, 3, 3) stack.

    The I1, I5 and I7 blocks vanish (their bases are constant in C). The
    remaining blocks, with V = C^-1, M_a = V N_a V, n_a = tr(V N_a):

        d2I2_ijkl = d_ij d_kl - (d_ik d_jl + d_il d_jk)/2
        d2I3      = (J/4) [V (x) V - 2 sym4(V, V)]
        d2I4      = -2 d2I3
        d2I(6|8)  = a det(C) { V (x) (n V - M) - M (x) V ... } (see code)

    where sym4(A, B)_ijkl = (A_ik B_jl + A_il B_jk)/2.
    """
    C = np.asarray(C, dtype=float)
    shp = C.shape[:-2]
    cof = cofactor_sym(C)
    det = (
        C[..., 0, 0] * cof[..., 0, 0]
        + C[..., 0, 1] * cof[..., 0, 1]
        + C[..., 0, 2] * cof[..., 0, 2]
    )
    J = np.sqrt(det)
    V = cof / det[..., None, None]
    eye = np.broadcast_to(EYE3, shp + (3, 3))

    out = np.zeros(shp + (n_active, 3, 3, 3, 3))
    out[..., 1, :, :, :, :] = _outer4(eye, eye) - _sym4(eye, eye)
    d2J = 0.25 * J[..., None, None, None, None] * (_outer4(V, V) - 2.0 * _sym4(V, V))
    out[..., 2, :, :, :, :] = d2J
    out[..., 3, :, :, :, :] = -2.0 * d2J
    if n_active >= 6:
        out[..., 5, :, :, :, :] = _aniso_cof_curvature(V, det, N1, alpha1)
    if n_active == 8:
        out[..., 7, :, :, :, :] = _aniso_cof_curvature(V, det, N2, alpha2)
    return out


def _outer4(A, B):
    return np.einsum("...ij,...kl->...ijkl", A, B)


def _sym4(A, B):
    return 0.5 * (
        np.einsum("...ik,...jl->...ijkl", A, B) + np.einsum("...il,...jk->...ijkl", A, B)
    )


def _aniso_cof_curvature(V, det, N, alpha):
    M = np.einsum("...ij,jk,...kl->...il", V, N, V)
    n = np.einsum("...ij,ij->...", V, N)
    nV_minus_M = n[..., None, None] * V - M
    G = (
        _outer4(V, nV_minus_M)
        - _outer4(M, V)
        - n[..., None, None, None, None] * _sym4(V, V)
        + _sym4(V, M)
        + _sym4(M, V)
    )
    return alpha * det[..., None, None, None, None] * G


def tensor4_to_66(T):
    """Project a minor-symmetric (..., 3, 3, 3, 3) tensor onto 6x6 component form."""
    T = np.asarray(T)
    out = np.empty(T.shape[:-4] + (6, 6), dtype=T.dtype)
    for a, (i, j) in enumerate(VOIGT):
        for b, (k, l) in enumerate(VOIGT):
            out[..., a, b] = T[..., i, j, k, l]
    return out


def tensor4_from_66(M):
    """Expand a 6x6 component matrix back to a full minor-symmetric tensor."""
    M = np.asarray(M)
    out = np.empty(M.shape[:-2] + (3, 3, 3, 3), dtype=M.dtype)
    for a, (i, j) in enumerate(VOIGT):
        for b, (k, l) in enumerate(VOIGT):
            out[..., i, j, k, l] = M[..., a, b]
            out[..., j, i, k, l] = M[..., a, b]
            out[..., i, j, l, k] = M[..., a, b]
            out[..., j, i, l, k] = M[..., a, b]
    return out


def apply_tangent(M66, U6):
    """Double contraction of a 6x6 component tangent with a packed symmetric tensor."""
    return np.einsum("...ab,...b->...a", M66, VOIGT_WEIGHTS * np.asarray(U6))


def recover_direction(N, gap_tol=1e-3):
    """Unit direction n with n (x) n closest to an (approximately rank-1) N.

    Solved by eigen-decomposition: the dominant eigenvector of sym(N). Raises
    when the two largest eigenvalues are too close to identify a single
    direction (relative gap below gap_tol). The sign is fixed so the first
    component of non-negligible magnitude is positive.
    """
    N = np.asarray(N, dtype=float)
    N = 0.5 * (N + N.T)
    w, Q = np.linalg.eigh(N)
    lam1, lam2 = w[2], w[1]
    scale = max(abs(lam1), 1e-300)
    if (lam1 - lam2) / scale < gap_tol:
        raise ValueError("ambiguous direction: two near-equal dominant eigenvalues")
    n = Q[:, 2]
    for comp in n:
        if abs(comp) > 1e-8:
            if comp < 0.0:
                n = -n
            break
    return n
