"""Discrete simplicial maps and the harmonic energy minimizer.

A map assigns every mesh node of the domain (carrying the metric sigma)
a target position in the same face realized under the metric tau.  Edge
nodes carry a single shared parameter per gluing class (their image
stays on the image edge by construction), truncation nodes are Dirichlet
data frozen to the initial map, and interior nodes move freely inside
the closed target face.

The energy is the piecewise-linear finite-element form of the harmonic
energy with hyperbolic target metric: the domain conformal factor drops
out in two dimensions, and the target density 1/v^2 is integrated by
one-point quadrature at the image of each triangle's centroid, which
keeps the gradient exact and cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.sparse.linalg import spsolve

from .errors import BarrierInfeasible, InvalidTarget, LineSearchFailure
from .halfplane import Mobius, Region, hyp_distance, membership
from .mesh import (
    CUT_NODE,
    EDGE_NODE,
    INTERIOR,
    ComplexMesh,
    MeshConfig,
    build_mesh,
    exhaust,
    node_correspondence,
)
from .metric import IdealMetric, face_chart, require_complete, vertex_local_model


@dataclass
class SolverConfig:
    grad_tol: float = 1e-7
    max_iterations: int = 60
    face_maxiter: int = 250
    polish_maxiter: int = 400
    mode: str = "W"
    barrier_weight: float = 1e-4
    barrier_stages: int = 3
    barrier_decay: float = 0.05
    stall_limit: int = 3
    stall_rel: float = 1e-14
    ycut_schedule: tuple = ()

    def __post_init__(self):
        if self.mode not in ("W", "D"):
            raise ValueError("mode must be 'W' or 'D'")
        if self.ycut_schedule and list(self.ycut_schedule) != sorted(
                self.ycut_schedule):
            raise ValueError("exhaustion schedule must be increasing")


@dataclass
class EnergyReport:
    total: float
    per_face: list
    trace: list = field(default_factory=list)
    grad_norm: float = math.nan
    mode: str = "W"
    iterations: int = 0
    converged: bool = False
    stalled: bool = False
    line_search_failed: bool = False
    min_jacobian: float = math.nan

    def as_dict(self) -> dict:
        return {
            "total_energy": self.total,
            "per_face": list(map(float, self.per_face)),
            "trace": list(map(float, self.trace)),
            "grad_norm": float(self.grad_norm),
            "mode": self.mode,
            "iterations": self.iterations,
            "converged": self.converged,
            "stalled": self.stalled,
            "line_search_failed": self.line_search_failed,
            "min_jacobian": float(self.min_jacobian),
        }


class _FaceGeometry:
    """Per-face domain quantities reused by every energy evaluation."""

    def __init__(self, fm):
        pts = fm.nodes
        tris = fm.triangles
        p0 = pts[tris[:, 0]]
        e1 = pts[tris[:, 1]] - p0
        e2 = pts[tris[:, 2]] - p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        assert np.all(det > 0)
        self.area = 0.5 * det
        # gradients of the three PL basis functions on each triangle
        g1 = np.stack([e2[:, 1] / det, -e2[:, 0] / det], axis=1)
        g2 = np.stack([-e1[:, 1] / det, e1[:, 0] / det], axis=1)
        g0 = -g1 - g2
        self.basis_grad = np.stack([g0, g1, g2], axis=1)  # (m, 3, 2)
        self.tris = tris
        self.num_nodes = fm.num_nodes
        # triangles incident to each node
        self.node_tris = [[] for _ in range(fm.num_nodes)]
        for t, tri in enumerate(tris):
            for n in tri:
                self.node_tris[int(n)].append(t)


class SimplicialMap:
    """Target data of a discrete simplicial map over a fixed mesh."""

    def __init__(self, mesh: ComplexMesh, tau: IdealMetric):
        require_complete(tau)
        self.mesh = mesh
        self.tau = tau
        self.tau_charts = [face_chart(tau, f)
                           for f in range(mesh.complex.num_triangles)]
        self.geometry = [_FaceGeometry(fm) for fm in mesh.faces]
        self.targets = [np.zeros((fm.num_nodes, 2)) for fm in mesh.faces]
        self.class_y = np.array([cls.y for cls in mesh.classes])
        self.class_fixed = np.array([cls.fixed for cls in mesh.classes])
        # inverse transports: edge local model of tau -> tau face chart,
        # flattened over class members for vectorized updates
        mem_face, mem_node, mem_cls = [], [], []
        coef = []
        self._member_maps = []
        for ci, cls in enumerate(mesh.classes):
            maps = []
            for face, node, side in cls.members:
                minv = self.tau_charts[face].side_transport[side].inverse()
                maps.append((face, node, minv))
                mem_face.append(face)
                mem_node.append(node)
                mem_cls.append(ci)
                coef.append((minv.a, minv.b, minv.c, minv.d,
                             -1.0 if minv.conj else 1.0))
            self._member_maps.append(maps)
        self._mem_face = np.array(mem_face, dtype=int)
        self._mem_node = np.array(mem_node, dtype=int)
        self._mem_cls = np.array(mem_cls, dtype=int)
        co = np.array(coef)
        self._mem_a, self._mem_b = co[:, 0], co[:, 1]
        self._mem_c, self._mem_d = co[:, 2], co[:, 3]
        self._mem_sign = co[:, 4]
        self._mem_det = self._mem_a * self._mem_d - self._mem_b * self._mem_c
        self._mem_rows_by_face = [
            np.flatnonzero(self._mem_face == f)
            for f in range(len(mesh.faces))]
        self.free_interior = [
            np.flatnonzero(fm.kind == INTERIOR) for fm in mesh.faces]
        self._class_local = None

    # -- construction and updates ---------------------------------------

    _SHARED = ("mesh", "tau", "tau_charts", "geometry", "class_fixed",
               "_member_maps", "_mem_face", "_mem_node", "_mem_cls",
               "_mem_a", "_mem_b", "_mem_c", "_mem_d", "_mem_sign",
               "_mem_det", "_mem_rows_by_face", "free_interior",
               "_class_local")

    def copy(self) -> "SimplicialMap":
        u = SimplicialMap.__new__(SimplicialMap)
        for name in self._SHARED:
            setattr(u, name, getattr(self, name))
        u.targets = [t.copy() for t in self.targets]
        u.class_y = self.class_y.copy()
        return u

    def set_class_param(self, idx: int, y: float):
        if y <= 0:
            raise InvalidTarget(f"edge parameter must stay positive: {y}")
        self.class_y[idx] = y
        for face, node, minv in self._member_maps[idx]:
            w = minv(1j * y)
            self.targets[face][node, 0] = w.real
            self.targets[face][node, 1] = w.imag

    def set_all_class_params(self, y: np.ndarray):
        if np.any(y <= 0):
            raise InvalidTarget("edge parameter must stay positive")
        self.class_y[:] = y
        zz = 1j * self._mem_sign * y[self._mem_cls]
        w = (self._mem_a * zz + self._mem_b) / (self._mem_c * zz + self._mem_d)
        for f, rows in enumerate(self._mem_rows_by_face):
            self.targets[f][self._mem_node[rows], 0] = w.real[rows]
            self.targets[f][self._mem_node[rows], 1] = w.imag[rows]

    def refresh_edge_targets(self):
        self.set_all_class_params(self.class_y.copy())

    def member_velocities(self) -> np.ndarray:
        """d(target position)/d(log y') for every class member."""
        y = self.class_y[self._mem_cls]
        zz = 1j * self._mem_sign * y
        vel = 1j * self._mem_sign * self._mem_det /             (self._mem_c * zz + self._mem_d) ** 2 * y
        return np.stack([vel.real, vel.imag], axis=1)

    def class_velocity(self, idx: int):
        """d(target position)/d(log y') for each member of the class."""
        y = float(self.class_y[idx])
        out = []
        for face, node, minv in self._member_maps[idx]:
            v = minv.velocity_along_edge(y) * y
            out.append((face, node, np.array([v.real, v.imag])))
        return out

    def class_local_structure(self):
        """Per class: (faces, triangle ids) incident to its member nodes."""
        if self._class_local is None:
            local = []
            for i, maps in enumerate(self._member_maps):
                items = []
                for face, node, _ in maps:
                    for t in self.geometry[face].node_tris[node]:
                        items.append((face, t))
                local.append(sorted(set(items)))
            self._class_local = local
        return self._class_local

    # -- diagnostics helpers ---------------------------------------------

    def triangle_data(self, face: int):
        """(J, v_c, area) per triangle: image Jacobian (m,2,2) with
        J[m, i, d] = d f^i / d x^d, centroid image height, domain area."""
        geo = self.geometry[face]
        P = self.targets[face][geo.tris]          # (m, 3, 2)
        J = np.einsum("mki,mkd->mid", P, geo.basis_grad)
        vc = P[:, :, 1].mean(axis=1)
        return J, vc, geo.area

    def image_dets(self, face: int):
        J, _, _ = self.triangle_data(face)
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    def min_jacobian(self) -> float:
        return min(float(self.image_dets(f).min())
                   for f in range(len(self.targets)))


# -- energy and gradient ---------------------------------------------------

def face_energy(u: SimplicialMap, face: int,
                domain_density: str = "hyperbolic") -> float:
    """One-point-quadrature energy of the map on one face.

    The 2-D harmonic energy is conformally invariant in the domain, so
    ``domain_density`` multiplies and divides the same factor; both
    settings agree to rounding and the option exists to assert that.
    """
    geo = u.geometry[face]
    P = u.targets[face][geo.tris]
    if np.any(P[:, :, 1] <= 0):
        raise InvalidTarget(f"face {face}: node image with v <= 0")
    J = np.einsum("mki,mkd->mid", P, geo.basis_grad)
    S = np.einsum("mid,mid->m", J, J)
    vc = P[:, :, 1].mean(axis=1)
    dens = np.ones_like(vc)
    if domain_density == "hyperbolic":
        pts = u.mesh.faces[face].nodes
        yc = pts[geo.tris][:, :, 1].mean(axis=1)
        lam = 1.0 / yc**2
        dens = lam / lam  # conformal factor cancels exactly in 2-D
    return float(np.sum(geo.area * dens * S / vc**2))


def energy(u: SimplicialMap, domain_density: str = "hyperbolic") -> EnergyReport:
    per_face = [face_energy(u, f, domain_density)
                for f in range(len(u.targets))]
    rep = EnergyReport(total=float(sum(per_face)), per_face=per_face,
                       min_jacobian=u.min_jacobian())
    return rep


def energy_oracle(u: SimplicialMap) -> float:
    """Independent plain-loop evaluation of the same discrete functional
    (kept free of the vectorized assembly for cross-checking)."""
    total = 0.0
    for face in range(len(u.targets)):
        fm = u.mesh.faces[face]
        T = u.targets[face]
        for tri in fm.triangles:
            x = [complex(*fm.nodes[i]) for i in tri]
            F = [T[i] for i in tri]
            d1, d2 = x[1] - x[0], x[2] - x[0]
            det = d1.real * d2.imag - d1.imag * d2.real
            area = 0.5 * det
            gs = [None] * 3
            gs[1] = np.array([d2.imag, -d2.real]) / det
            gs[2] = np.array([-d1.imag, d1.real]) / det
            gs[0] = -gs[1] - gs[2]
            J = np.zeros((2, 2))
            for k in range(3):
                J[0] += F[k][0] * gs[k]
                J[1] += F[k][1] * gs[k]
            S = float((J * J).sum())
            vc = (F[0][1] + F[1][1] + F[2][1]) / 3.0
            total += area * S / vc**2
    return total


#: weight of the smooth quadratic penalty keeping free interior images
#: out of the open disc under the bottom side during optimization; the
#: resulting violations are O(1e-6) of the face scale and are removed by
#: the final projection.
_CIRCLE_PENALTY = 1e6


def _circle_penalty(u: SimplicialMap, face: int):
    """(value, gradient contribution) of the disc-avoidance penalty."""
    ids = u.free_interior[face]
    T = u.targets[face]
    if len(ids) == 0:
        return 0.0, None, ids
    R = u.tau_charts[face].scale
    dx = T[ids, 0] - R / 2.0
    dy = T[ids, 1]
    phi = ((R / 2.0) ** 2 - dx * dx - dy * dy) / R**2
    act = phi > 0
    if not np.any(act):
        return 0.0, None, ids
    val = _CIRCLE_PENALTY * float(np.sum(phi[act] ** 2))
    g = np.zeros((len(ids), 2))
    coef = -4.0 * _CIRCLE_PENALTY * phi[act] / R**2
    g[act, 0] = coef * dx[act]
    g[act, 1] = coef * dy[act]
    return val, g, ids


def _face_grad_arrays(u: SimplicialMap, face: int, barrier_w: float = 0.0,
                      with_penalty: bool = False, unfold_k: float = 0.0,
                      unfold_margin: float = 0.0):
    """(energy, dE/dtargets) for one face, including the orientation
    barrier when ``barrier_w`` is positive and the disc-avoidance
    penalty when requested (optimization objectives only)."""
    geo = u.geometry[face]
    T = u.targets[face]
    P = T[geo.tris]
    if np.any(P[:, :, 1] <= 0):
        raise InvalidTarget(f"face {face}: node image with v <= 0")
    J = np.einsum("mki,mkd->mid", P, geo.basis_grad)
    S = np.einsum("mid,mid->m", J, J)
    vc = P[:, :, 1].mean(axis=1)
    A = geo.area
    E = float(np.sum(A * S / vc**2))

    # dE/dP[m,k,i] = 2 A / vc^2 * (J_i . g_k)  -  (2/3) A S / vc^3 [i=v]
    coef = (A / vc**2)[:, None, None]
    term1 = 2.0 * coef * np.einsum("mid,mkd->mki", J, geo.basis_grad)
    term1[:, :, 1] -= ((2.0 / 3.0) * A * S / vc**3)[:, None]

    if barrier_w > 0.0 or unfold_k > 0.0:
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        dd = np.empty_like(J)  # d(det)/dJ = adjugate
        dd[:, 0, 0] = J[:, 1, 1]
        dd[:, 1, 1] = J[:, 0, 0]
        dd[:, 0, 1] = -J[:, 1, 0]
        dd[:, 1, 0] = -J[:, 0, 1]
    if barrier_w > 0.0:
        if np.any(det <= 0):
            raise BarrierInfeasible(
                f"face {face}: non-positive image Jacobian in mode D")
        E += float(barrier_w * np.sum(-A * np.log(det)))
        w = (-barrier_w * A / det)[:, None, None]
        term1 += np.einsum("mid,mkd->mki", w * dd, geo.basis_grad)
    if unfold_k > 0.0:
        margin = unfold_margin
        gap = np.maximum(margin - det, 0.0)
        E += float(unfold_k * np.sum(A * gap**2))
        w = (-2.0 * unfold_k * A * gap)[:, None, None]
        term1 += np.einsum("mid,mkd->mki", w * dd, geo.basis_grad)

    grad = np.zeros_like(T)
    np.add.at(grad, geo.tris.ravel(),
              term1.reshape(-1, 2))
    if with_penalty:
        val, gpen, ids = _circle_penalty(u, face)
        if gpen is not None:
            E += val
            grad[ids] += gpen
    return E, grad


def energy_gradient(u: SimplicialMap, barrier_w: float = 0.0,
                    with_penalty: bool = False, unfold_k: float = 0.0,
                    unfold_margin: float = 0.0):
    """(total energy, per-face dE/dtarget arrays, per-class dE/dlog y')."""
    total = 0.0
    grads = []
    for f in range(len(u.targets)):
        E, g = _face_grad_arrays(u, f, barrier_w, with_penalty,
                                 unfold_k, unfold_margin)
        total += E
        grads.append(g)
    vel = u.member_velocities()
    contrib = np.zeros(len(u._mem_cls))
    for f, rows in enumerate(u._mem_rows_by_face):
        if len(rows):
            g = grads[f][u._mem_node[rows]]
            contrib[rows] = np.einsum("md,md->m", g, vel[rows])
    class_grad = np.bincount(u._mem_cls, weights=contrib,
                             minlength=len(u.class_y))
    class_grad[u.class_fixed] = 0.0
    return total, grads, class_grad


def free_gradient_norm(u: SimplicialMap, barrier_w: float = 0.0) -> float:
    """Sup norm of the projected gradient over the free variables.

    Components that push an image through an active wall of the closed
    target strip (x in [0, R], v > 0) are inactive directions and do not
    count against stationarity."""
    _, grads, class_grad = energy_gradient(u, barrier_w)
    worst = 0.0
    for f, g in enumerate(grads):
        ids = u.free_interior[f]
        if not len(ids):
            continue
        R = u.tau_charts[f].scale
        T = u.targets[f][ids]
        gx = g[ids, 0].copy()
        gy = g[ids, 1].copy()
        gx[(T[:, 0] <= 1e-12 * R) & (gx > 0)] = 0.0
        gx[(T[:, 0] >= R * (1 - 1e-12)) & (gx < 0)] = 0.0
        gy[(T[:, 1] <= 2e-9 * R) & (gy > 0)] = 0.0
        # nodes resting on the bottom semicircle: drop the inward-pushing
        # radial component (an active constraint of the closed face)
        dx = T[:, 0] - R / 2.0
        rr = np.hypot(dx, T[:, 1])
        on_circle = rr <= (R / 2.0) * (1 + 1e-9)
        if np.any(on_circle):
            rx, ry = dx[on_circle] / rr[on_circle], T[on_circle, 1] / rr[on_circle]
            rad = gx[on_circle] * rx + gy[on_circle] * ry
            push = rad > 0  # descent direction -g points into the disc
            gx_c = gx[on_circle] - np.where(push, rad, 0.0) * rx
            gy_c = gy[on_circle] - np.where(push, rad, 0.0) * ry
            gx[on_circle] = gx_c
            gy[on_circle] = gy_c
        worst = max(worst, float(np.max(np.abs(gx))),
                    float(np.max(np.abs(gy))))
    if len(class_grad):
        worst = max(worst, float(np.max(np.abs(class_grad))))
    return worst


# -- initial map ------------------------------------------------------------

def _fem_harmonic_extension(fm, geo, boundary_mask, values):
    """Euclidean-harmonic (cotangent FEM) extension of boundary values."""
    n = fm.num_nodes
    tris = geo.tris
    G = geo.basis_grad
    A = geo.area
    rows, cols, vals = [], [], []
    for a in range(3):
        for b in range(3):
            w = A * np.einsum("md,md->m", G[:, a], G[:, b])
            rows.append(tris[:, a])
            cols.append(tris[:, b])
            vals.append(w)
    K = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n))
    free = np.flatnonzero(~boundary_mask)
    fixed = np.flatnonzero(boundary_mask)
    out = values.copy()
    if len(free) == 0:
        return out
    rhs = -K[free][:, fixed] @ values[fixed]
    sol = spsolve(K[free][:, free].tocsc(), rhs)
    out[free] = sol.reshape(len(free), -1)
    return out


def _graph_extension(fm, geo, boundary_mask, values):
    """Uniform-weight graph-Laplacian extension (maximum principle)."""
    n = fm.num_nodes
    rows, cols = [], []
    for tri in geo.tris:
        for a in range(3):
            for b in range(3):
                if a != b:
                    rows.append(tri[a])
                    cols.append(tri[b])
    W = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    W = (W > 0).astype(float)
    d = np.asarray(W.sum(axis=1)).ravel()
    L = sparse.diags(d) - W
    free = np.flatnonzero(~boundary_mask)
    fixed = np.flatnonzero(boundary_mask)
    out = values.copy()
    if len(free) == 0:
        return out
    rhs = -L[free][:, fixed] @ values[fixed]
    out[free] = spsolve(L[free][:, free].tocsc(), rhs).reshape(len(free), -1)
    return out


def initial_map(mesh: ComplexMesh, tau: IdealMetric) -> SimplicialMap:
    """Discrete finite-energy starting map.

    Edge classes map by the side-0 scale ratio of the two local models;
    truncation nodes map by coordinate identity between the vertex local
    models of the two metrics (so the image of the cut is the cut of the
    target); interiors fill by Euclidean-harmonic extension per face.
    """
    sigma = mesh.metric
    require_complete(tau)
    u = SimplicialMap(mesh, tau)
    c = mesh.complex

    from .metric import edge_local_model

    # vertex local models for both metrics (same combinatorial tree)
    dev_s, dev_t = {}, {}
    for v in c.vertices:
        ms = vertex_local_model(sigma, v)
        mt = vertex_local_model(tau, v)
        for key, cm in ms.corners.items():
            dev_s[key] = cm.dev
        for key, cm in mt.corners.items():
            dev_t[key] = cm.dev

    # edge classes
    for i, cls in enumerate(mesh.classes):
        e = c.edges[cls.edge_id]
        a_sig = edge_local_model(sigma, e).scales[0]
        a_tau = edge_local_model(tau, e).scales[0]
        if not cls.fixed:
            u.set_class_param(i, cls.y * a_tau / a_sig)
            continue
        # cut crossing: coordinate identity through the vertex models
        face, node, side = cls.members[0]
        fm = mesh.faces[face]
        corner = int(fm.corner[node])
        z = complex(*fm.nodes[node])
        w = dev_s[(face, corner)](z)
        zt = dev_t[(face, corner)].inverse()(w)
        yprime = (u.tau_charts[face].side_transport[side](zt)).imag
        u.set_class_param(i, float(yprime))

    # cut nodes by coordinate identity
    for face, fm in enumerate(mesh.faces):
        ids = np.flatnonzero(fm.kind == CUT_NODE)
        for nid in ids:
            corner = int(fm.corner[nid])
            z = complex(*fm.nodes[nid])
            zt = dev_t[(face, corner)].inverse()(dev_s[(face, corner)](z))
            u.targets[face][nid] = (zt.real, zt.imag)

    # interior nodes by harmonic extension of the boundary values
    for face, fm in enumerate(mesh.faces):
        boundary = fm.kind != INTERIOR
        vals = u.targets[face]
        ext = _fem_harmonic_extension(fm, u.geometry[face], boundary, vals)
        if np.any(ext[~boundary][:, 1] <= 1e-12):
            ext = _graph_extension(fm, u.geometry[face], boundary, vals)
        u.targets[face][~boundary] = ext[~boundary]
    return u


# -- minimization -----------------------------------------------------------

def _project_into_face(u: SimplicialMap, face: int):
    """Clamp interior images into the closed target face."""
    chart = u.tau_charts[face]
    R = chart.scale
    ids = u.free_interior[face]
    T = u.targets[face]
    x = np.clip(T[ids, 0], 0.0, R)
    y = np.maximum(T[ids, 1], 1e-12)
    # push points inside the bottom semicircle radially onto it
    dx = x - R / 2.0
    rr = np.hypot(dx, y)
    inside = rr < R / 2.0
    if np.any(inside):
        scale = (R / 2.0) / rr[inside]
        x[inside] = R / 2.0 + dx[inside] * scale
        y[inside] = y[inside] * scale
    T[ids, 0] = x
    T[ids, 1] = y


def _face_objective(u: SimplicialMap, face: int, barrier_w: float):
    ids = u.free_interior[face]

    def fun(x):
        u.targets[face][ids] = x.reshape(-1, 2)
        try:
            E, g = _face_grad_arrays(u, face, barrier_w, with_penalty=True)
        except (InvalidTarget, BarrierInfeasible):
            return 1e50, np.zeros(2 * len(ids))
        return E, g[ids].ravel()

    return fun


def _coord_bounds(u: SimplicialMap, face: int, n: int):
    """Box bounds keeping v positive and x within the closed strip."""
    R = u.tau_charts[face].scale
    lo = np.tile([0.0, 1e-9 * R], n)
    hi = np.tile([R, np.inf], n)
    return optimize.Bounds(lo, hi)


def _face_sweep(u: SimplicialMap, face: int, barrier_w: float,
                maxiter: int) -> float:
    """Minimize over one face's interior targets; returns the decrease."""
    ids = u.free_interior[face]
    if len(ids) == 0:
        return 0.0
    x0 = u.targets[face][ids].ravel().copy()
    e0, _ = _face_grad_arrays(u, face, barrier_w)
    fun = _face_objective(u, face, barrier_w)
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            bounds=_coord_bounds(u, face, len(ids)),
                            options={"maxiter": maxiter, "ftol": 1e-18,
                                     "gtol": 1e-14, "maxcor": 30})
    u.targets[face][ids] = res.x.reshape(-1, 2)
    _project_into_face(u, face)
    try:
        e1, _ = _face_grad_arrays(u, face, barrier_w)
    except (InvalidTarget, BarrierInfeasible):
        e1 = math.inf
    if not (e1 <= e0):
        u.targets[face][ids] = x0.reshape(-1, 2)
        return 0.0
    return e0 - e1


def _class_sweep(u: SimplicialMap, barrier_w: float) -> float:
    """1-D line searches over every free edge-class parameter."""
    local = u.class_local_structure()
    decrease = 0.0
    for i in range(len(u.class_y)):
        if u.class_fixed[i]:
            continue
        items = local[i]

        def local_energy():
            tot = 0.0
            for face, t in items:
                geo = u.geometry[face]
                tri = geo.tris[t]
                P = u.targets[face][tri]
                if np.any(P[:, 1] <= 0):
                    return 1e50
                J = np.einsum("ki,kd->id", P, geo.basis_grad[t])
                S = float((J * J).sum())
                vc = float(P[:, 1].mean())
                val = geo.area[t] * S / vc**2
                if barrier_w > 0:
                    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
                    if det <= 0:
                        return 1e50
                    val -= barrier_w * geo.area[t] * math.log(det)
                tot += val
            return tot

        y0 = float(u.class_y[i])
        e0 = local_energy()

        def f(el):
            u.set_class_param(i, math.exp(el))
            return local_energy()

        l0 = math.log(y0)
        res = optimize.minimize_scalar(
            f, bracket=None, bounds=(l0 - 0.5, l0 + 0.5), method="bounded",
            options={"xatol": 1e-12})
        if res.fun < e0:
            u.set_class_param(i, math.exp(float(res.x)))
            decrease += e0 - float(res.fun)
        else:
            u.set_class_param(i, y0)
    return decrease


def _pack(u: SimplicialMap):
    parts = [u.targets[f][u.free_interior[f]].ravel()
             for f in range(len(u.targets))]
    free_cls = np.flatnonzero(~u.class_fixed)
    parts.append(np.log(u.class_y[free_cls]))
    return np.concatenate(parts), free_cls


def _unpack(u: SimplicialMap, x, free_cls):
    k = 0
    for f in range(len(u.targets)):
        ids = u.free_interior[f]
        m = 2 * len(ids)
        u.targets[f][ids] = x[k:k + m].reshape(-1, 2)
        k += m
    ynew = u.class_y.copy()
    ynew[free_cls] = np.exp(x[k:k + len(free_cls)])
    u.set_all_class_params(ynew)


def _global_objective(u: SimplicialMap, free_cls, barrier_w: float,
                      unfold_k: float = 0.0, unfold_margin: float = 0.0):
    def fun(x):
        _unpack(u, x, free_cls)
        try:
            total, grads, class_grad = energy_gradient(
                u, barrier_w, with_penalty=True, unfold_k=unfold_k,
                unfold_margin=unfold_margin)
        except (InvalidTarget, BarrierInfeasible):
            return 1e50, np.zeros_like(x)
        parts = [grads[f][u.free_interior[f]].ravel()
                 for f in range(len(u.targets))]
        parts.append(class_grad[free_cls])
        return total, np.concatenate(parts)

    return fun


def unfold(u0: SimplicialMap, max_rounds: int = 10,
           maxiter: int = 600) -> SimplicialMap:
    """Drive all image-triangle Jacobians positive by an increasing
    quadratic penalty on folds; raises BarrierInfeasible on failure.

    The energy term is kept during early rounds (so the unfolded state
    stays close to the minimizer) and dropped for the final rounds if
    feasibility has not been reached."""
    u = u0.copy()
    dets = np.concatenate([u.image_dets(f) for f in range(len(u.targets))])
    margin = 1e-3 * float(np.median(np.abs(dets)))
    e_scale = energy(u).total
    k = 10.0 * e_scale / max(margin, 1e-12) ** 2 * 1e-3
    for rnd in range(max_rounds):
        if u.min_jacobian() > margin / 2:
            return u
        x0, free_cls = _pack(u)
        fun = _global_objective(u, free_cls, 0.0, unfold_k=k,
                                unfold_margin=margin)
        s = _dof_scale(u, free_cls)
        nint = len(x0) - len(free_cls)
        lo = np.full_like(x0, -np.inf)
        hi = np.full_like(x0, np.inf)
        lo[nint:] = x0[nint:] - 3.0
        hi[nint:] = x0[nint:] + 3.0

        def fs(z):
            val, g = fun(z / s)
            return val, g / s

        res = optimize.minimize(fs, x0 * s, jac=True, method="L-BFGS-B",
                                bounds=optimize.Bounds(lo * s, hi * s),
                                options={"maxiter": maxiter, "ftol": 1e-18,
                                         "gtol": 1e-14, "maxcor": 30})
        _unpack(u, res.x / s, free_cls)
        for f in range(len(u.targets)):
            _project_into_face(u, f)
        u.refresh_edge_targets()
        k *= 30.0
    # last resort: pure feasibility objective
    for _ in range(3):
        if u.min_jacobian() > 0:
            return u
        x0, free_cls = _pack(u)
        s = _dof_scale(u, free_cls)

        def pure(x):
            _unpack(u, x, free_cls)
            tot = 0.0
            parts = []
            for f in range(len(u.targets)):
                geo = u.geometry[f]
                P = u.targets[f][geo.tris]
                J = np.einsum("mki,mkd->mid", P, geo.basis_grad)
                det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
                gap = np.maximum(margin - det, 0.0)
                tot += float(np.sum(geo.area * gap**2))
                dd = np.empty_like(J)
                dd[:, 0, 0] = J[:, 1, 1]
                dd[:, 1, 1] = J[:, 0, 0]
                dd[:, 0, 1] = -J[:, 1, 0]
                dd[:, 1, 0] = -J[:, 0, 1]
                w = (-2.0 * geo.area * gap)[:, None, None]
                term = np.einsum("mid,mkd->mki", w * dd, geo.basis_grad)
                g = np.zeros_like(u.targets[f])
                np.add.at(g, geo.tris.ravel(), term.reshape(-1, 2))
                parts.append((f, g))
            vel = u.member_velocities()
            contrib = np.zeros(len(u._mem_cls))
            gs = {f: g for f, g in parts}
            for f, rows in enumerate(u._mem_rows_by_face):
                if len(rows):
                    contrib[rows] = np.einsum(
                        "md,md->m", gs[f][u._mem_node[rows]], vel[rows])
            cgrad = np.bincount(u._mem_cls, weights=contrib,
                                minlength=len(u.class_y))
            cgrad[u.class_fixed] = 0.0
            flat = [gs[f][u.free_interior[f]].ravel()
                    for f in range(len(u.targets))]
            flat.append(cgrad[free_cls])
            return tot, np.concatenate(flat)

        def pure_s(z):
            val, g = pure(z / s)
            return val, g / s

        res = optimize.minimize(pure_s, x0 * s, jac=True, method="L-BFGS-B",
                                options={"maxiter": maxiter, "ftol": 0,
                                         "gtol": 1e-16, "maxcor": 30})
        _unpack(u, res.x / s, free_cls)
        for f in range(len(u.targets)):
            _project_into_face(u, f)
        u.refresh_edge_targets()
    if u.min_jacobian() > 0:
        return u
    raise BarrierInfeasible(
        f"unfolding failed: min Jacobian {u.min_jacobian():.3g}")


def _dof_scale(u: SimplicialMap, free_cls) -> np.ndarray:
    """Square root of a diagonal Hessian estimate per free DOF.

    The finite-element diagonal sum 2 A |grad phi|^2 / v_c^2 captures the
    stiffness variation across the cusp regions; preconditioning with it
    cuts the quasi-Newton iteration count by an order of magnitude."""
    parts = []
    diags = []
    for f in range(len(u.targets)):
        geo = u.geometry[f]
        P = u.targets[f][geo.tris]
        vc = np.maximum(P[:, :, 1].mean(axis=1), 1e-12)
        w = 2.0 * geo.area / vc**2
        gg = np.einsum("mkd,mkd->mk", geo.basis_grad, geo.basis_grad)
        diag = np.zeros(geo.num_nodes)
        np.add.at(diag, geo.tris.ravel(), (w[:, None] * gg).ravel())
        diags.append(diag)
        ids = u.free_interior[f]
        parts.append(np.repeat(diag[ids], 2))
    vel = u.member_velocities()
    cdiag = np.zeros(len(u.class_y))
    contrib = np.einsum("md,md->m", vel, vel)
    for f, rows in enumerate(u._mem_rows_by_face):
        if len(rows):
            cdiag_part = diags[f][u._mem_node[rows]] * contrib[rows]
            np.add.at(cdiag, u._mem_cls[rows], cdiag_part)
    parts.append(cdiag[free_cls])
    d = np.concatenate(parts)
    return np.sqrt(np.maximum(d, 1e-8 * d.max()))


def _global_polish(u: SimplicialMap, barrier_w: float, maxiter: int) -> float:
    x0, free_cls = _pack(u)
    e0, _, _ = energy_gradient(u, barrier_w)
    fun = _global_objective(u, free_cls, barrier_w)
    lo = np.full_like(x0, -np.inf)
    hi = np.full_like(x0, np.inf)
    k = 0
    for f in range(len(u.targets)):
        n = len(u.free_interior[f])
        R = u.tau_charts[f].scale
        lo[k:k + 2 * n:2] = 0.0
        hi[k:k + 2 * n:2] = R
        lo[k + 1:k + 2 * n:2] = 1e-9 * R
        k += 2 * n
    # trust bounds on the log edge parameters, re-centered per call
    lo[k:] = x0[k:] - 3.0
    hi[k:] = x0[k:] + 3.0
    s = _dof_scale(u, free_cls)

    def fun_scaled(z):
        val, g = fun(z / s)
        return val, g / s

    res = optimize.minimize(fun_scaled, x0 * s, jac=True, method="L-BFGS-B",
                            bounds=optimize.Bounds(lo * s, hi * s),
                            options={"maxiter": maxiter, "ftol": 1e-18,
                                     "gtol": 1e-14, "maxcor": 30})
    _unpack(u, res.x / s, free_cls)
    for f in range(len(u.targets)):
        _project_into_face(u, f)
    try:
        e1, _, _ = energy_gradient(u, barrier_w)
    except (InvalidTarget, BarrierInfeasible):
        e1 = math.inf
    if not (e1 <= e0):
        _unpack(u, x0, free_cls)
        return 0.0
    return e0 - e1


def _projected_polish(u: SimplicialMap, barrier_w: float,
                      iters: int = 60) -> float:
    """Armijo projected gradient over all free DOFs.

    Monotone even against the nonconvex semicircle constraint, used to
    escape states where the quasi-Newton step plus projection stalls."""
    e0, grads, class_grad = energy_gradient(u, barrier_w)
    total_dec = 0.0
    e_now = e0
    step = 1.0
    free_cls = np.flatnonzero(~u.class_fixed)
    for _ in range(iters):
        _, grads, class_grad = energy_gradient(u, barrier_w)
        gmax = max([np.max(np.abs(g[u.free_interior[f]])) if
                    len(u.free_interior[f]) else 0.0
                    for f, g in enumerate(grads)] +
                   [np.max(np.abs(class_grad[free_cls]))
                    if len(free_cls) else 0.0])
        if gmax == 0.0:
            break
        base_targets = [t.copy() for t in u.targets]
        base_y = u.class_y.copy()
        improved = False
        while step > 1e-14:
            for f in range(len(u.targets)):
                ids = u.free_interior[f]
                u.targets[f][ids] = base_targets[f][ids] -                     (step / gmax) * grads[f][ids]
                _project_into_face(u, f)
            ynew = base_y.copy()
            ynew[free_cls] = base_y[free_cls] * np.exp(
                -(step / gmax) * class_grad[free_cls])
            u.set_all_class_params(ynew)
            try:
                e_try = sum(face_energy_and_barrier(u, f, barrier_w)
                            for f in range(len(u.targets)))
            except (InvalidTarget, BarrierInfeasible):
                e_try = math.inf
            if e_try < e_now - 1e-16:
                total_dec += e_now - e_try
                e_now = e_try
                improved = True
                step = min(step * 2.0, 1e3)
                break
            step *= 0.25
        if not improved:
            for f in range(len(u.targets)):
                u.targets[f][:] = base_targets[f]
            u.class_y[:] = base_y
            u.refresh_edge_targets()
            break
    return total_dec


def face_energy_and_barrier(u: SimplicialMap, face: int,
                            barrier_w: float) -> float:
    E, _ = _face_grad_arrays(u, face, barrier_w)
    return E


def _check_simplicial(u: SimplicialMap):
    for f in range(len(u.targets)):
        chart = u.tau_charts[f]
        for nid in u.free_interior[f]:
            z = complex(*u.targets[f][nid])
            reg, _ = membership(chart.triangle, z, tol=1e-7)
            assert reg is not Region.OUTSIDE, \
                f"interior image left the closed face {f}"


def minimize(u0: SimplicialMap, cfg: SolverConfig):
    """Alternating face/edge sweeps with a global quasi-Newton polish.

    Face sweeps are discrete Dirichlet replacements (the face energy
    never increases); edge sweeps are 1-D searches over each shared
    edge parameter, the discrete balancing step.  Mode D adds a
    log-barrier on every image-triangle Jacobian with decreasing weight.
    Every accepted step keeps the recorded energy trace non-increasing.
    """
    u = u0.copy()
    nfaces = len(u.targets)
    e_now = energy(u).total
    trace = [e_now]
    report = EnergyReport(total=e_now, per_face=[], trace=trace,
                          mode=cfg.mode)

    if cfg.mode == "D":
        dets0 = min(float(u.image_dets(f).min()) for f in range(nfaces))
        if dets0 <= 0:
            raise BarrierInfeasible(
                f"orientation-reversing start: min Jacobian {dets0:.3g}")
        weights = [cfg.barrier_weight * cfg.barrier_decay**k
                   for k in range(cfg.barrier_stages)]
        weights.append(0.0)
    else:
        weights = [0.0]

    iterations = 0
    stalls = 0
    converged = False
    ls_failed = False
    for w in weights:
        gnorm = free_gradient_norm(u, 0.0)
        if cfg.mode == "W" and gnorm <= cfg.grad_tol:
            converged = True
            break
        for _ in range(cfg.max_iterations):
            iterations += 1
            e_before = e_now
            candidate = u.copy()
            for f in range(nfaces):
                _face_sweep(candidate, f, w, cfg.face_maxiter)
            _class_sweep(candidate, w)
            _global_polish(candidate, w, cfg.polish_maxiter)
            try:
                e_cand = energy(candidate).total
            except InvalidTarget:
                e_cand = math.inf
            feasible = True
            if cfg.mode == "D":
                feasible = min(float(candidate.image_dets(f).min())
                               for f in range(nfaces)) > 0
            if e_cand <= e_now and feasible:
                u = candidate
                e_now = e_cand
                trace.append(e_now)
            else:
                ls_failed = ls_failed or (e_cand > e_now)
                stalls += 1
                break
            if e_before - e_now < 1e-10 * max(1.0, abs(e_now)):
                # quasi-Newton plus projection stalled; try monotone
                # projected descent to escape the nonconvex wall
                candidate = u.copy()
                dec = _projected_polish(candidate, w)
                if dec > 0:
                    try:
                        e_cand = energy(candidate).total
                    except InvalidTarget:
                        e_cand = math.inf
                    ok = e_cand <= e_now
                    if cfg.mode == "D" and ok:
                        ok = min(float(candidate.image_dets(f).min())
                                 for f in range(nfaces)) > 0
                    if ok:
                        u = candidate
                        e_now = e_cand
                        trace.append(e_now)
            gnorm = free_gradient_norm(u, 0.0)
            if gnorm <= cfg.grad_tol:
                converged = True
                break
            if e_before - e_now < cfg.stall_rel * max(1.0, abs(e_now)):
                stalls += 1
                if stalls >= cfg.stall_limit:
                    converged = True
                    break
            else:
                stalls = 0
        if converged and w == 0.0:
            break

    _check_simplicial(u)
    rep = energy(u)
    rep.trace = trace
    rep.mode = cfg.mode
    rep.iterations = iterations
    rep.converged = converged or free_gradient_norm(u) <= cfg.grad_tol
    rep.stalled = stalls >= cfg.stall_limit
    rep.line_search_failed = ls_failed
    rep.grad_norm = free_gradient_norm(u)
    assert all(trace[i + 1] <= trace[i] + 1e-12 * max(1.0, abs(trace[i]))
               for i in range(len(trace) - 1))
    return u, rep


def refine_map(u_coarse: SimplicialMap, mesh_fine: ComplexMesh) -> SimplicialMap:
    """Prolong a solution onto a finer mesh of the same truncation.

    Fine-node values interpolate the coarse piecewise-linear map at the
    fine node's domain position; free class parameters interpolate
    log-linearly along each edge.  Truncation data is rebuilt fresh (it
    is Dirichlet and h-independent as a curve)."""
    u0 = initial_map(mesh_fine, u_coarse.tau)
    coarse = u_coarse.mesh

    for f, fm in enumerate(mesh_fine.faces):
        cfm = coarse.faces[f]
        cpts = cfm.nodes
        ctris = cfm.triangles
        tri_pts = cpts[ctris]          # (m, 3, 2)
        d1 = tri_pts[:, 1] - tri_pts[:, 0]
        d2 = tri_pts[:, 2] - tri_pts[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        free = u0.free_interior[f]
        P = fm.nodes[free]
        # barycentric coordinates of every fine point in every coarse
        # triangle; meshes are small enough for the dense test
        rel = P[:, None, :] - tri_pts[None, :, 0, :]
        b1 = (rel[:, :, 0] * d2[None, :, 1] - rel[:, :, 1] * d2[None, :, 0]) / det
        b2 = (d1[None, :, 0] * rel[:, :, 1] - d1[None, :, 1] * rel[:, :, 0]) / det
        b0 = 1.0 - b1 - b2
        score = np.minimum(np.minimum(b0, b1), b2)
        best = np.argmax(score, axis=1)
        rows = np.arange(len(P))
        lam = np.stack([b0[rows, best], b1[rows, best], b2[rows, best]],
                       axis=1)
        lam = np.clip(lam, 0.0, None)
        lam /= lam.sum(axis=1, keepdims=True)
        vals = np.einsum("nk,nkd->nd", lam,
                         u_coarse.targets[f][ctris[best]])
        u0.targets[f][free] = vals
        _project_into_face(u0, f)

    # class parameters: log-linear interpolation along each edge
    by_edge = {}
    for k, cl in enumerate(coarse.classes):
        by_edge.setdefault(cl.edge_id, []).append(k)
    ynew = u0.class_y.copy()
    for k, cl in enumerate(mesh_fine.classes):
        if cl.fixed:
            continue
        idxs = by_edge[cl.edge_id]
        ys = np.array([coarse.classes[i].y for i in idxs])
        yp = np.array([u_coarse.class_y[i] for i in idxs])
        t = np.interp(math.log(cl.y), np.log(ys), np.log(yp))
        ynew[k] = math.exp(t)
    u0.set_all_class_params(ynew)
    return u0


@dataclass
class ExhaustionStage:
    cut_level: float
    report: EnergyReport
    stability: float  # sup displacement of first-stage node images


def solve_with_exhaustion(c, sigma: IdealMetric, tau: IdealMetric,
                          mesh_cfg: MeshConfig, cfg: SolverConfig):
    """Minimize on an increasing family of truncations.

    Each stage reuses the previous solution on the region it covers and
    extends by the initial map on the new band; the sup hyperbolic
    displacement of the first-stage node images between consecutive
    stages is recorded as the stability metric.
    """
    schedule = list(cfg.ycut_schedule) or [mesh_cfg.cut_level]
    stages = []
    mesh = None
    prev_u = None
    first_mesh = None
    chain = []  # per face, composed old->new node index maps
    prev_images = None
    u = None
    for Y in schedule:
        if mesh is None:
            mesh = build_mesh(c, sigma, MeshConfig(
                mesh_cfg.target_h, Y, mesh_cfg.min_angle_deg,
                mesh_cfg.min_area, mesh_cfg.quadrature_order))
            first_mesh = mesh
            chain = [np.arange(fm.num_nodes) for fm in mesh.faces]
        else:
            new_mesh = exhaust(mesh, Y)
            corr = node_correspondence(mesh, new_mesh)
            chain = [corr[f][chain[f]] for f in range(len(chain))]
            mesh = new_mesh
        u0 = initial_map(mesh, tau)
        if prev_u is not None:
            corr_last = node_correspondence(prev_u.mesh, mesh)
            # keep solved values on the old region
            for f in range(len(u0.targets)):
                u0.targets[f][corr_last[f]] = prev_u.targets[f]
            # carry over free class parameters by (edge, y) identity
            old_idx = {(cl.edge_id, cl.y): k
                       for k, cl in enumerate(prev_u.mesh.classes)}
            for k, cl in enumerate(mesh.classes):
                j = old_idx.get((cl.edge_id, cl.y))
                if j is not None and not cl.fixed:
                    u0.set_class_param(k, float(prev_u.class_y[j]))
        u, rep = minimize(u0, cfg)
        if prev_images is None:
            stability = 0.0
        else:
            worst = 0.0
            for f in range(len(chain)):
                cur = u.targets[f][chain[f]]
                for a, b in zip(prev_images[f], cur):
                    worst = max(worst, hyp_distance(complex(*a), complex(*b)))
            stability = worst
        prev_images = [u.targets[f][chain[f]].copy()
                       for f in range(len(chain))]
        stages.append(ExhaustionStage(Y, rep, stability))
        prev_u = u
    return u, stages
