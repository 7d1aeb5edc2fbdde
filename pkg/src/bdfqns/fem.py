"""Taylor-Hood P2/P1 space and assembly of the Navier-Stokes operators.

Velocity coefficient vectors are blocked by component: entries
``[0, n_nodes)`` hold u_x at the P2 nodes, ``[n_nodes, 2 n_nodes)`` hold u_y.
P2 nodes are the mesh vertices followed by the edge midpoints. Pressure is P1
on the vertices.

Field callables are vectorised: ``u(x, y, t)`` returns an array of shape
``(2,) + x.shape`` and ``p(x, y, t)`` an array shaped like ``x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .quadrature import TriangleRule, assembly_rule, norm_rule

# local P2 node k >= 3 sits on the midpoint of edge (a, b)
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


def p2_values(bary: np.ndarray) -> np.ndarray:
    """P2 shape functions at barycentric points, shape (nq, 6)."""
    l0, l1, l2 = bary.T
    return np.column_stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0]
    )


def p2_bary_derivatives(bary: np.ndarray) -> np.ndarray:
    """d phi_i / d lambda_j, shape (nq, 6, 3)."""
    nq = len(bary)
    d = np.zeros((nq, 6, 3))
    for i in range(3):
        d[:, i, i] = 4 * bary[:, i] - 1
    for k, (a, b) in enumerate(LOCAL_EDGES):
        d[:, 3 + k, a] = 4 * bary[:, b]
        d[:, 3 + k, b] = 4 * bary[:, a]
    return d


class _Scatter:
    """Fixed CSR pattern for element matrices with a precomputed scatter map."""

    def __init__(self, row_dofs: np.ndarray, col_dofs: np.ndarray, shape: tuple[int, int]):
        nr, nc = row_dofs.shape[1], col_dofs.shape[1]
        rows = np.repeat(row_dofs, nc, axis=1).ravel()
        cols = np.tile(col_dofs, (1, nr)).ravel()
        keys = rows.astype(np.int64) * shape[1] + cols
        uniq, self.inverse = np.unique(keys, return_inverse=True)
        r, c = np.divmod(uniq, shape[1])
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        self.indptr = np.cumsum(indptr)
        self.indices = c
        self.nnz = len(uniq)
        self.shape = shape

    def __call__(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.inverse, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


@dataclass(frozen=True, eq=False)
class _Geometry:
    """Per-rule element data: quadrature weights times area, P2 values and gradients."""

    rule: TriangleRule
    points: np.ndarray  # (ncell, nq, 2)
    jw: np.ndarray  # (ncell, nq)
    phi: np.ndarray  # (nq, 6)
    dphi: np.ndarray  # (ncell, nq, 6, 2)
    psi: np.ndarray  # (nq, 3) P1 values


class MixedSpace:
    """P2 velocity / P1 pressure on one mesh, with Dirichlet flags."""

    def __init__(self, mesh: Mesh, dirichlet_markers: Iterable[int] = (1,)):
        self.mesh = mesh
        self.dirichlet_markers = frozenset(int(m) for m in dirichlet_markers)
        tri = mesh.triangles
        nv = mesh.n_vertices
        local = np.stack([tri[:, [a, b]] for a, b in LOCAL_EDGES], axis=1)  # (ncell, 3, 2)
        keys = np.sort(local, axis=2).reshape(-1, 2)
        edges, inv = np.unique(keys, axis=0, return_inverse=True)
        self.edges = edges
        self.cell_edges = inv.reshape(-1, 3)
        self.cell_nodes = np.hstack([tri, nv + self.cell_edges])  # (ncell, 6)
        self.n_nodes = nv + len(edges)
        mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        self.node_coords = np.vstack([mesh.vertices, mid])
        self.n_u = 2 * self.n_nodes
        self.n_p = nv
        self.velocity_dofs = np.hstack([self.cell_nodes, self.cell_nodes + self.n_nodes])
        self.pressure_dofs = tri

        node_flag = np.zeros(self.n_nodes, dtype=bool)
        edge_index = {tuple(e): i for i, e in enumerate(edges.tolist())}
        for (a, b), m in zip(mesh.boundary_edges.tolist(), mesh.boundary_markers.tolist()):
            if m in self.dirichlet_markers:
                node_flag[[a, b, nv + edge_index[tuple(sorted((a, b)))]]] = True
        self.boundary_node_mask = node_flag
        self.dirichlet_mask = np.concatenate([node_flag, node_flag])
        self.dirichlet_dofs = np.flatnonzero(self.dirichlet_mask)
        self.free_dofs = np.flatnonzero(~self.dirichlet_mask)

        self._geom: dict[int, _Geometry] = {}
        self._scatter_uu = _Scatter(self.velocity_dofs, self.velocity_dofs, (self.n_u, self.n_u))
        self._scatter_nn = _Scatter(self.cell_nodes, self.cell_nodes, (self.n_nodes, self.n_nodes))
        self._scatter_pu = _Scatter(self.pressure_dofs, self.velocity_dofs, (self.n_p, self.n_u))
        self._scatter_pp = _Scatter(self.pressure_dofs, self.pressure_dofs, (self.n_p, self.n_p))

    def geometry(self, rule: TriangleRule) -> _Geometry:
        key = id(rule)
        if key not in self._geom:
            v = self.mesh.vertices[self.mesh.triangles]  # (ncell, 3, 2)
            d1, d2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
            det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
            area = 0.5 * det
            # gradients of barycentric coordinates, (ncell, 3, 2)
            gl = np.empty((len(det), 3, 2))
            gl[:, 1] = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
            gl[:, 2] = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
            gl[:, 0] = -gl[:, 1] - gl[:, 2]
            db = p2_bary_derivatives(rule.bary)
            dphi = np.einsum("qij,cjd->cqid", db, gl)
            points = np.einsum("qj,cjd->cqd", rule.bary, v)
            jw = area[:, None] * rule.weights[None, :]
            self._geom[key] = _Geometry(rule, points, jw, p2_values(rule.bary), dphi, rule.bary.copy())
        return self._geom[key]

    def scatter_velocity(self, local: np.ndarray) -> sp.csr_matrix:
        return self._scatter_uu(local)

    def scatter_velocity_scalar(self, local: np.ndarray) -> sp.csr_matrix:
        """Block-diagonal velocity matrix from one scalar 6x6 block per cell."""
        s = self._scatter_nn(local)
        return sp.block_diag([s, s], format="csr")

    # ------------------------------------------------------------------ evaluation

    def velocity_at(self, u: np.ndarray, rule: TriangleRule) -> tuple[np.ndarray, np.ndarray]:
        """Velocity values (ncell, nq, 2) and gradients (ncell, nq, 2, 2) [comp, deriv]."""
        g = self.geometry(rule)
        ux = u[: self.n_nodes][self.cell_nodes]
        uy = u[self.n_nodes:][self.cell_nodes]
        coef = np.stack([ux, uy], axis=-1)  # (ncell, 6, 2)
        val = np.einsum("qi,cik->cqk", g.phi, coef)
        grad = np.einsum("cqid,cik->cqkd", g.dphi, coef)
        return val, grad

    def pressure_at(self, p: np.ndarray, rule: TriangleRule) -> np.ndarray:
        g = self.geometry(rule)
        return np.einsum("qi,ci->cq", g.psi, p[self.pressure_dofs])


@dataclass(frozen=True, eq=False)
class AssembledOperators:
    M: sp.csr_matrix
    A: sp.csr_matrix
    Bdiv: sp.csr_matrix
    Gd: sp.csr_matrix
    Mp: sp.csr_matrix
    mean: np.ndarray = field(repr=False)  # integrals of the pressure basis functions


def build_mixed_space(mesh: Mesh, dirichlet_markers: Iterable[int] = (1,)) -> MixedSpace:
    return MixedSpace(mesh, dirichlet_markers)


def _cell_order(space: MixedSpace, order: Optional[np.ndarray]) -> np.ndarray:
    n = space.mesh.n_cells
    return np.arange(n) if order is None else np.asarray(order)


def assemble_linear_operators(
    space: MixedSpace, nu: float = 1.0, mu: float = 0.0, cell_order: Optional[np.ndarray] = None
) -> AssembledOperators:
    """Mass, nu-scaled stiffness, divergence, mu-scaled grad-div and pressure mass.

    ``cell_order`` permutes the element traversal; the result must not depend on it.
    """
    if nu <= 0 or mu < 0:
        raise ValueError("need nu > 0 and mu >= 0")
    g = space.geometry(assembly_rule())
    o = _cell_order(space, cell_order)
    jw, phi, dphi, psi = g.jw[o], g.phi, g.dphi[o], g.psi

    mass = np.einsum("cq,qi,qj->cij", jw, phi, phi)
    stiff = np.einsum("cq,cqid,cqjd->cij", jw, dphi, dphi)
    grad_div = np.einsum("cq,cqia,cqjb->caibj", jw, dphi, dphi).reshape(-1, 12, 12)
    div = np.einsum("cq,qk,cqjb->ckbj", jw, psi, dphi).reshape(-1, 3, 12)
    pmass = np.einsum("cq,qk,ql->ckl", jw, psi, psi)

    def scat(scatter, local, rows, cols):
        return scatter.__class__(rows[o], cols[o], scatter.shape)(local)

    vd, pd, cn = space.velocity_dofs, space.pressure_dofs, space.cell_nodes
    if cell_order is None:
        Ms = space._scatter_nn(mass)
        As = space._scatter_nn(stiff)
        Gd = space._scatter_uu(grad_div)
        B = space._scatter_pu(div)
        Mp = space._scatter_pp(pmass)
    else:
        Ms = scat(space._scatter_nn, mass, cn, cn)
        As = scat(space._scatter_nn, stiff, cn, cn)
        Gd = scat(space._scatter_uu, grad_div, vd, vd)
        B = scat(space._scatter_pu, div, pd, vd)
        Mp = scat(space._scatter_pp, pmass, pd, pd)
    M = sp.block_diag([Ms, Ms], format="csr")
    A = sp.block_diag([As, As], format="csr") * nu
    mean = np.asarray(Mp.sum(axis=1)).ravel()
    return AssembledOperators(M.tocsr(), A.tocsr(), B, (Gd * mu).tocsr(), Mp, mean)


def _convection_local(space: MixedSpace, w: np.ndarray) -> np.ndarray:
    """Scalar 6x6 blocks of b(w, phi_j e_d, phi_i e_d)."""
    g = space.geometry(assembly_rule())
    wv, wg = space.velocity_at(w, assembly_rule())
    divw = wg[..., 0, 0] + wg[..., 1, 1]
    adv = np.einsum("cqd,cqjd->cqj", wv, g.dphi)  # w . grad phi_j
    local = np.einsum("cq,qi,cqj->cij", g.jw, g.phi, adv)
    local += 0.5 * np.einsum("cq,cq,qi,qj->cij", g.jw, divw, g.phi, g.phi)
    return local


def assemble_convection(space: MixedSpace, w: np.ndarray) -> sp.csr_matrix:
    """Matrix N(w) with (N(w) v)_i = b(w, v, phi_i)."""
    return space.scatter_velocity_scalar(_convection_local(space, w))


def assemble_convection_transposed_role(space: MixedSpace, w: np.ndarray) -> sp.csr_matrix:
    """Matrix N'(w) with (N'(w) v)_i = b(v, w, phi_i)."""
    g = space.geometry(assembly_rule())
    wv, wg = space.velocity_at(w, assembly_rule())  # wg[c, q, comp, deriv]
    # (phi_j e_d . grad) w_c phi_i + 1/2 d_d phi_j w_c phi_i
    t1 = np.einsum("cq,qi,qj,cqkd->ckidj", g.jw, g.phi, g.phi, wg)
    t2 = 0.5 * np.einsum("cq,qi,cqjd,cqk->ckidj", g.jw, g.phi, g.dphi, wv)
    local = (t1 + t2).reshape(-1, 12, 12)
    return space.scatter_velocity(local)


def assemble_convection_jacobian(space: MixedSpace, w: np.ndarray) -> sp.csr_matrix:
    """Jacobian of u -> b(u, u, .) at u = w."""
    return (assemble_convection(space, w) + assemble_convection_transposed_role(space, w)).tocsr()


def assemble_load(space: MixedSpace, f: Callable, t: float) -> np.ndarray:
    """Load vector (f(t), phi_i) for a vector field f."""
    g = space.geometry(assembly_rule())
    pts = g.points
    fv = np.asarray(f(pts[..., 0], pts[..., 1], t), dtype=float)  # (2, ncell, nq)
    fv = np.broadcast_to(fv, (2,) + pts.shape[:2])
    out = np.zeros(space.n_u)
    for comp in range(2):
        local = np.einsum("cq,cq,qi->ci", g.jw, fv[comp], g.phi)
        np.add.at(out, space.cell_nodes + comp * space.n_nodes, local)
    return out


def interpolate_velocity(space: MixedSpace, f: Callable, t: float = 0.0) -> np.ndarray:
    x, y = space.node_coords.T
    v = np.broadcast_to(np.asarray(f(x, y, t), dtype=float), (2, space.n_nodes))
    return np.concatenate([v[0], v[1]])


def interpolate_pressure(space: MixedSpace, f: Callable, t: float = 0.0) -> np.ndarray:
    x, y = space.mesh.vertices.T
    return np.broadcast_to(np.asarray(f(x, y, t), dtype=float), (space.n_p,)).copy()


def interpolate(space: MixedSpace, f: Callable, t: float = 0.0, kind: str = "velocity") -> np.ndarray:
    """Nodal interpolant of ``f`` at time t into the velocity or pressure space."""
    if kind == "velocity":
        return interpolate_velocity(space, f, t)
    if kind == "pressure":
        return interpolate_pressure(space, f, t)
    raise ValueError(f"unknown space kind {kind!r}")


def _numeric_gradient(f: Callable, x, y, t, h: float = 1e-5) -> np.ndarray:
    fx = (np.asarray(f(x + h, y, t)) - np.asarray(f(x - h, y, t))) / (2 * h)
    fy = (np.asarray(f(x, y + h, t)) - np.asarray(f(x, y - h, t))) / (2 * h)
    return np.stack([fx, fy], axis=1)  # (2 comp, 2 deriv, ...)


def error_norms(
    space: MixedSpace,
    u_h: np.ndarray,
    p_h: Optional[np.ndarray],
    exact_u: Callable,
    exact_p: Optional[Callable],
    t: float,
    exact_grad_u: Optional[Callable] = None,
) -> tuple[float, float, float]:
    """(L2 velocity error, H1-seminorm velocity error, L2 pressure error).

    The pressure error is measured after removing the mean of p_h - p.
    ``exact_grad_u(x, y, t)`` returns shape (2, 2, ...) indexed [component, derivative];
    without it the exact gradient is taken by central differences.
    """
    rule = norm_rule()
    g = space.geometry(rule)
    x, y = g.points[..., 0], g.points[..., 1]
    uv, ug = space.velocity_at(u_h, rule)
    ue = np.broadcast_to(np.asarray(exact_u(x, y, t), dtype=float), (2,) + x.shape)
    diff = uv - np.moveaxis(ue, 0, -1)
    l2u = np.sqrt(np.sum(g.jw * np.sum(diff**2, axis=-1)))
    if exact_grad_u is None:
        ge = _numeric_gradient(exact_u, x, y, t)
    else:
        ge = np.broadcast_to(np.asarray(exact_grad_u(x, y, t), dtype=float), (2, 2) + x.shape)
    gdiff = ug - np.moveaxis(np.moveaxis(ge, 0, -1), 0, -1)
    h1u = np.sqrt(np.sum(g.jw * np.sum(gdiff**2, axis=(-2, -1))))
    l2p = 0.0
    if p_h is not None and exact_p is not None:
        pe = np.broadcast_to(np.asarray(exact_p(x, y, t), dtype=float), x.shape)
        pd = space.pressure_at(p_h, rule) - pe
        pd = pd - np.sum(g.jw * pd) / np.sum(g.jw)
        l2p = np.sqrt(np.sum(g.jw * pd**2))
    return float(l2u), float(h1u), float(l2p)


def mass_norm(M: sp.spmatrix, v: np.ndarray) -> float:
    """Discrete L2 norm (v^T M v)^(1/2)."""
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def write_vtk(space: MixedSpace, u: np.ndarray, p: np.ndarray, path, title: str = "bdfqns") -> None:
    """Legacy ASCII VTK unstructured grid with vertex velocity and pressure."""
    mesh = space.mesh
    nv = mesh.n_vertices
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {nv} double")
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    lines.append(f"CELLS {mesh.n_cells} {4 * mesh.n_cells}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += ["5"] * mesh.n_cells
    lines.append(f"POINT_DATA {nv}")
    lines.append("VECTORS velocity double")
    ux, uy = u[:nv], u[space.n_nodes: space.n_nodes + nv]
    lines += [f"{a!r} {b!r} 0.0" for a, b in zip(ux.tolist(), uy.tolist())]
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines += [repr(v) for v in p.tolist()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
