"""Total-Lagrangian finite elements driving the surrogate as a material law.

A small displacement-driven harness: structured hexahedral boxes, trilinear
elements with 2x2x2 Gauss quadrature, Newton iteration on the internal-force
residual with the consistent tangent

    K_aibj = int dN_a/dX_M (delta_ij S_MN + F_iK CC_KMNQ F_jQ) dN_b/dX_N dV,

and dense solves (the meshes of interest stay in the hundreds of nodes).
All quadrature points of all elements go to the constitutive model in one
batch per Newton iteration, so the network is evaluated once per iteration.

The canned load case is a simply supported beam with a prescribed downward
displacement on the midspan top face; the orientation inverse problem seeks
the fiber layout minimizing the peak Von Mises stress of that beam.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import energy, inverse
from . import tensor_core as tc

# local node corners of the reference cube, bottom face then top face
XI_NODES = np.array(
    [
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, 1.0],
    ]
)
GAUSS_POINTS = XI_NODES / np.sqrt(3.0)
GAUSS_WEIGHTS = np.ones(8)


@dataclass
class HexMesh:
    nodes: np.ndarray  # (n_nodes, 3) reference coordinates
    elems: np.ndarray  # (n_elems, 8) node indices

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_dof(self):
        return 3 * self.nodes.shape[0]


def box_mesh(lengths=(4.0, 1.0, 1.0), divisions=(8, 2, 2)):
    """Structured hexahedral mesh of a box cornered at the origin."""
    nx, ny, nz = divisions
    if min(divisions) < 1:
        raise ValueError("divisions must be at least 1 per axis")
    xs = np.linspace(0.0, lengths[0], nx + 1)
    ys = np.linspace(0.0, lengths[1], ny + 1)
    zs = np.linspace(0.0, lengths[2], nz + 1)
    K, J, I = np.meshgrid(np.arange(nz + 1), np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    nodes = np.column_stack([xs[I.ravel()], ys[J.ravel()], zs[K.ravel()]])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    elems = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                elems.append(
                    [
                        nid(i, j, k),
                        nid(i + 1, j, k),
                        nid(i + 1, j + 1, k),
                        nid(i, j + 1, k),
                        nid(i, j, k + 1),
                        nid(i + 1, j, k + 1),
                        nid(i + 1, j + 1, k + 1),
                        nid(i, j + 1, k + 1),
                    ]
                )
    return HexMesh(nodes, np.asarray(elems, dtype=int))


def shape_gradients(xi):
    """Trilinear shape values (8,) and reference-cube gradients (8, 3) at xi."""
    s = XI_NODES
    terms = 1.0 + s * np.asarray(xi)[None, :]
    N = 0.125 * terms.prod(axis=1)
    dN = np.empty((8, 3))
    for d in range(3):
        others = [e for e in range(3) if e != d]
        dN[:, d] = 0.125 * s[:, d] * terms[:, others[0]] * terms[:, others[1]]
    return N, dN


def face_nodes(mesh, axis, value, tol=1e-9):
    """Indices of nodes lying on the plane coordinate[axis] == value."""
    return np.flatnonzero(np.abs(mesh.nodes[:, axis] - value) < tol)


def dofs_of(nodes, components=(0, 1, 2)):
    """Flat dof indices for the given node indices and displacement components."""
    nodes = np.asarray(nodes, dtype=int)
    return np.concatenate([3 * nodes + c for c in components])


# ---------------------------------------------------------------------------
# assembly


@dataclass
class QuadratureData:
    dNdX: np.ndarray  # (n_elems, 8 qp, 8 nodes, 3)
    wdetJ: np.ndarray  # (n_elems, 8 qp)


def precompute_quadrature(mesh):
    dN_all = np.stack([shape_gradients(xi)[1] for xi in GAUSS_POINTS])  # (8qp, 8, 3)
    Xe = mesh.nodes[mesh.elems]  # (E, 8, 3)
    Jac = np.einsum("qad,eam->eqdm", dN_all, Xe)
    detJ = np.linalg.det(Jac)
    if np.any(detJ <= 0):
        raise ValueError("mesh has non-positive Jacobians")
    invJ = np.linalg.inv(Jac)
    dNdX = np.einsum("qad,eqmd->eqam", dN_all, invJ)
    return QuadratureData(dNdX, detJ * GAUSS_WEIGHTS[None, :])


def deformation_gradients(mesh, quad, u):
    ue = u.reshape(-1, 3)[mesh.elems]  # (E, 8, 3)
    F = np.einsum("eai,eqam->eqim", ue, quad.dNdX)
    F += np.eye(3)
    return F


@dataclass
class AssemblyResult:
    residual: np.ndarray  # (n_dof,) internal forces (no external loads)
    K: np.ndarray  # (n_dof, n_dof) consistent tangent
    F: np.ndarray  # (E, 8, 3, 3) deformation gradients
    S: np.ndarray  # (E, 8, 3, 3) second Piola-Kirchhoff stresses


def assemble(mesh, quad, model, D, u, structure=None, with_tangent=True):
    """Internal-force residual and tangent for the current displacement."""
    E, Q = quad.wdetJ.shape
    F = deformation_gradients(mesh, quad, u)
    Fb = F.reshape(E * Q, 3, 3)
    Cb = np.einsum("bki,bkj->bij", Fb, Fb)
    Db = np.broadcast_to(np.asarray(D, dtype=float), (E * Q, np.size(D))).copy()
    Sb = energy.stress(model, Cb, Db, structure=structure)
    S = Sb.reshape(E, Q, 3, 3)

    P = np.einsum("eqik,eqkm->eqim", F, S)
    fe = np.einsum("eq,eqim,eqam->eai", quad.wdetJ, P, quad.dNdX)
    residual = np.zeros(mesh.n_dof)
    np.add.at(residual.reshape(-1, 3), mesh.elems, fe)

    if not with_tangent:
        return AssemblyResult(residual, None, F, S)

    M66 = energy.tangent(model, Cb, Db, structure=structure)
    CC = tc.tensor4_from_66(M66).reshape(E, Q, 3, 3, 3, 3)
    T1 = np.einsum("eqiK,eqKMNQ->eqiMNQ", F, CC, optimize=True)
    Amat = np.einsum("eqiMNQ,eqjQ->eqiMjN", T1, F, optimize=True)
    Ke = np.einsum("eq,eqaM,eqiMjN,eqbN->eaibj", quad.wdetJ, quad.dNdX, Amat, quad.dNdX, optimize=True)
    G = np.einsum("eq,eqaM,eqMN,eqbN->eab", quad.wdetJ, quad.dNdX, S, quad.dNdX, optimize=True)
    Ke += G[:, :, None, :, None] * np.eye(3)[None, None, :, None, :]

    edofs = (3 * mesh.elems[:, :, None] + np.arange(3)[None, None, :]).reshape(E, 24)
    K = np.zeros((mesh.n_dof, mesh.n_dof))
    np.add.at(K, (edofs[:, :, None], edofs[:, None, :]), Ke.reshape(E, 24, 24))
    return AssemblyResult(residual, K, F, S)


# ---------------------------------------------------------------------------
# Newton solve


def von_mises(sigma):
    """Von Mises equivalent of (..., 3, 3) Cauchy stresses, sqrt(3/2 dev:dev)."""
    sigma = np.asarray(sigma, dtype=float)
    dev = sigma - np.trace(sigma, axis1=-2, axis2=-1)[..., None, None] / 3.0 * np.eye(3)
    return np.sqrt(1.5 * np.einsum("...ij,...ij->...", dev, dev))


@dataclass
class FemResult:
    u: np.ndarray                  # (n_nodes, 3)
    F: np.ndarray                  # (E, 8, 3, 3) at the final state
    S: np.ndarray                  # (E, 8, 3, 3)
    newton_norms: list             # per load step, list of residual infinity norms
    reactions: np.ndarray          # (n_dof,) internal forces at the final state

    def cauchy(self):
        J = np.linalg.det(self.F)
        return np.einsum("eqim,eqmn,eqjn->eqij", self.F, self.S, self.F) / J[..., None, None]

    def von_mises(self):
        return von_mises(self.cauchy())


def von_mises_max(state):
    """Peak Von Mises stress over all quadrature points of a converged state."""
    return float(state.von_mises().max())


def solve_displacement(mesh, model, D, bc_dofs, bc_values, n_steps=5, tol=1e-9,
                       max_iter=25, structure=None):
    """Displacement-driven Newton solve with uniform load stepping.

    bc_dofs are flat dof indices held at bc_values (ramped linearly over the
    steps); all remaining dofs are free and carry no external load. Raises
    if any Newton loop fails to reach the residual tolerance.
    """
    bc_dofs = np.asarray(bc_dofs, dtype=int)
    bc_values = np.asarray(bc_values, dtype=float)
    if bc_dofs.size != bc_values.size:
        raise ValueError("bc_dofs and bc_values must have equal length")
    if np.unique(bc_dofs).size != bc_dofs.size:
        raise ValueError("bc_dofs contains duplicates")
    quad = precompute_quadrature(mesh)
    free = np.setdiff1d(np.arange(mesh.n_dof), bc_dofs)
    u = np.zeros(mesh.n_dof)
    norms_per_step = []
    last = None
    for step in range(1, n_steps + 1):
        u[bc_dofs] = bc_values * (step / n_steps)
        norms = []
        for it in range(max_iter):
            last = assemble(mesh, quad, model, D, u, structure=structure)
            r_f = last.residual[free]
            norm = float(np.max(np.abs(r_f))) if free.size else 0.0
            norms.append(norm)
            if norm < tol:
                break
            u[free] += _solve_spd_or_general(last.K[np.ix_(free, free)], -r_f)
        else:
            raise RuntimeError(f"Newton did not converge in load step {step} "
                               f"after {max_iter} iterations (residual {norms[-1]:.3e})")
        norms_per_step.append(norms)
    return FemResult(u.reshape(-1, 3), last.F, last.S, norms_per_step, last.residual)


def _solve_spd_or_general(K, b):
    """Cholesky solve, falling back to a general direct solve with a warning."""
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), b)
    except np.linalg.LinAlgError:
        warnings.warn("global stiffness is not positive definite; "
                      "continuing with a general direct solve")
        return np.linalg.solve(K, b)


def stretch_bc(mesh, stretch, axis=0):
    """Clamp the axis=0 face and pull the opposite face to the given stretch.

    The clamped face is fully fixed; on the pulled face only the axial
    component is prescribed, leaving lateral contraction free. Returns
    (bc_dofs, bc_values).
    """
    length = mesh.nodes[:, axis].max()
    fixed = face_nodes(mesh, axis, 0.0)
    pulled = face_nodes(mesh, axis, length)
    bc_dofs = np.concatenate([dofs_of(fixed), 3 * pulled + axis])
    bc_values = np.concatenate([np.zeros(3 * fixed.size), np.full(pulled.size, (stretch - 1.0) * length)])
    return bc_dofs, bc_values


# ---------------------------------------------------------------------------
# the simply supported beam and its orientation inverse problem


@dataclass
class FemConfig:
    """Beam geometry, loading, solver settings, and the material inputs."""

    lengths: tuple = (4.0, 1.0, 1.0)
    divisions: tuple = (8, 2, 2)
    u0: float = 0.1  # downward midspan displacement magnitude
    n_steps: int = 5
    tol: float = 1e-9
    max_iter: int = 25
    D: np.ndarray | None = None
    phi: float | None = None  # orientation override; None keeps the model's own
    p_raw: np.ndarray | None = None

    def __post_init__(self):
        if min(self.lengths) <= 0:
            raise ValueError("beam dimensions must be positive")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")

    def structure(self):
        if self.phi is None:
            return None
        if self.p_raw is None:
            raise ValueError("phi given without a rotation axis p_raw")
        return tc.structure_tensors(self.phi, self.p_raw)


def beam_bc(mesh, u0):
    """Simple supports on the bottom edges, prescribed dip at the midspan top.

    The bottom edge at x=0 is pinned, the one at x=L rolls along x, and the
    top-face node column at x=L/2 is pushed down by u0. Returns
    (bc_dofs, bc_values).
    """
    L = mesh.nodes[:, 0].max()
    H = mesh.nodes[:, 2].max()
    bottom = face_nodes(mesh, 2, 0.0)
    left = np.intersect1d(bottom, face_nodes(mesh, 0, 0.0))
    right = np.intersect1d(bottom, face_nodes(mesh, 0, L))
    mid_top = np.intersect1d(face_nodes(mesh, 2, H), face_nodes(mesh, 0, L / 2.0))
    if mid_top.size == 0:
        raise ValueError("no node column at midspan: use an even x division count")
    bc_dofs = np.concatenate([dofs_of(left), dofs_of(right, (1, 2)), 3 * mid_top + 2])
    bc_values = np.concatenate([np.zeros(3 * left.size + 2 * right.size), np.full(mid_top.size, -u0)])
    return bc_dofs, bc_values


def solve_static(mesh, cfg, model):
    """Converged state of the simply supported beam under the configured dip."""
    if cfg.D is None:
        raise ValueError("FemConfig.D must hold the design vector")
    bc_dofs, bc_values = beam_bc(mesh, cfg.u0)
    return solve_displacement(mesh, model, cfg.D, bc_dofs, bc_values,
                              n_steps=cfg.n_steps, tol=cfg.tol,
                              max_iter=cfg.max_iter, structure=cfg.structure())


@dataclass
class OrientationFit:
    phi: float | None
    axis: np.ndarray | None
    n1: np.ndarray | None
    n2: np.ndarray | None
    objective: float  # peak Von Mises stress at the best orientation
    restarts: list = field(default_factory=list)  # (x, objective, stop) triples
    traces: list = field(default_factory=list)  # per restart, (evals, best f) pairs
    insensitive: bool = False

    def report(self):
        if self.insensitive:
            return {"insensitive": True, "objective": self.objective}
        return {
            "insensitive": False,
            "phi": self.phi,
            "axis": self.axis.tolist(),
            "n1": self.n1.tolist(),
            "n2": self.n2.tolist(),
            "objective": self.objective,
            "restarts": [
                {"x": x.tolist(), "objective": f, "stop": stop} for x, f, stop in self.restarts
            ],
        }


def invert_orientation(mesh, cfg, model, restarts=5, seed=0, max_evals=150, tol=1e-6):
    """Fiber orientation minimizing the beam's peak Von Mises stress.

    Nelder-Mead over axis-angle coordinates from seeded random starts;
    returns the best fit together with every restart's outcome and trace.
    Isotropic models carry no orientation, so the search is skipped and the
    result flagged insensitive. Raises if no restart produces a converged
    solve.
    """
    if model.config.aniso_class == "iso":
        obj = von_mises_max(solve_static(mesh, cfg, model))
        return OrientationFit(None, None, None, None, obj, insensitive=True)

    base = FemConfig(cfg.lengths, cfg.divisions, cfg.u0, cfg.n_steps, cfg.tol,
                     cfg.max_iter, cfg.D, None, None)

    def objective(x):
        try:
            structure = tc.structure_tensors(x[0], x[1:4])
            state = solve_displacement(mesh, model, base.D, *beam_bc(mesh, base.u0),
                                       n_steps=base.n_steps, tol=base.tol,
                                       max_iter=base.max_iter, structure=structure)
        except (ValueError, RuntimeError, np.linalg.LinAlgError):
            return np.inf
        return von_mises_max(state)

    bounds = np.array([[0.0, np.pi], [-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0]])
    rng = np.random.default_rng(seed)
    best = None
    summaries, traces = [], []
    for k in range(restarts):
        x0 = bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.random(4)
        if np.linalg.norm(x0[1:]) < 1e-3:
            x0[1:] = np.array([0.3, 0.3, 0.9])
        res = inverse.nelder_mead(objective, x0, step=0.2 * (bounds[:, 1] - bounds[:, 0]),
                                  bounds=bounds, max_evals=max_evals, tol=tol)
        summaries.append((res.x, res.fun, res.stop))
        traces.append(res.history)
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun):
        raise RuntimeError("every restart failed to produce a converged solve")
    N1, N2, R = tc.structure_tensors(best.x[0], best.x[1:4])
    return OrientationFit(
        float(best.x[0]),
        best.x[1:4] / np.linalg.norm(best.x[1:4]),
        R[:, 0].copy(),
        R[:, 1].copy(),
        best.fun,
        summaries,
        traces,
    )


# ---------------------------------------------------------------------------
# output


VTK_HEADER = "# vtk DataFile Version 3.0"


def write_vtk(path, mesh, u=None, point_data=None, cell_data=None, comment="anisoforge output"):
    """Legacy ASCII VTK unstructured grid with optional nodal/cell fields."""
    with open(path, "w") as f:
        f.write(f"{VTK_HEADER}\n{comment}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_nodes} double\n")
        for p in mesh.nodes:
            f.write(f"{p[0]:.12g} {p[1]:.12g} {p[2]:.12g}\n")
        E = mesh.elems.shape[0]
        f.write(f"CELLS {E} {9 * E}\n")
        for e in mesh.elems:
            f.write("8 " + " ".join(str(n) for n in e) + "\n")
        f.write(f"CELL_TYPES {E}\n")
        f.writelines("12\n" for _ in range(E))

        point_fields = dict(point_data or {})
        if u is not None:
            point_fields.setdefault("displacement", np.asarray(u).reshape(-1, 3))
        if point_fields:
            f.write(f"POINT_DATA {mesh.n_nodes}\n")
            for name, values in point_fields.items():
                values = np.asarray(values)
                if values.ndim == 2 and values.shape[1] == 3:
                    f.write(f"VECTORS {name} double\n")
                    for v in values:
                        f.write(f"{v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
                else:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in values.reshape(-1):
                        f.write(f"{v:.12g}\n")
        if cell_data:
            f.write(f"CELL_DATA {E}\n")
            for name, values in cell_data.items():
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in np.asarray(values).reshape(-1):
                    f.write(f"{v:.12g}\n")
