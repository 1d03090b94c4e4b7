"""Ideal hyperbolic structures encoded by shift parameters.

A metric stores, for each edge with incident slots e_1..e_n, the shifts
of the gluings e_1 -> e_j for j = 2..n; every other pairwise shift
follows from antisymmetry and the cocycle identity.  Local models of
edges (per-slot scales with max 1), developed local models of vertices,
completeness residuals over link-graph cycles and the dimension counts
of the space of (complete) structures are all derived here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .complex_core import Complex, Edge, Vertex, cycle_basis, cycle_node_sequence, link_components, link_graph
from .errors import IncompleteAtVertex, IncompleteMetric
from .halfplane import IdealTriangle, INF, Mobius, cusp_symmetry, side_to_standard_position


class IdealMetric:
    """Shift-parameter data for one complex; immutable by convention."""

    def __init__(self, complex_: Complex, shifts):
        self.complex = complex_
        clean = []
        for e in complex_.edges:
            row = tuple(float(x) for x in shifts[e.id])
            if len(row) != e.degree - 1:
                raise ValueError(
                    f"edge {e.id} needs {e.degree - 1} shifts, got {len(row)}")
            if not all(math.isfinite(x) for x in row):
                raise ValueError(f"edge {e.id} has non-finite shifts")
            clean.append(row)
        self.shifts: tuple[tuple[float, ...], ...] = tuple(clean)
        self._charts: dict[int, FaceChart] = {}
        self._vertex_models: dict[int, VertexLocalModel] = {}

    def stored_vector(self) -> np.ndarray:
        return np.array([x for row in self.shifts for x in row], dtype=float)

    @staticmethod
    def from_vector(complex_: Complex, vec) -> "IdealMetric":
        rows, k = [], 0
        for e in complex_.edges:
            n = e.degree - 1
            rows.append(tuple(float(x) for x in vec[k:k + n]))
            k += n
        assert k == len(vec)
        return IdealMetric(complex_, rows)


def zero_metric(c: Complex) -> IdealMetric:
    return IdealMetric(c, [(0.0,) * (e.degree - 1) for e in c.edges])


def slot_log_scales(m: IdealMetric, e: Edge) -> np.ndarray:
    """Log-scales of the incident slots, normalized so slot 0 has 0."""
    return np.concatenate(([0.0], -np.asarray(m.shifts[e.id], dtype=float)))


def full_shift_table(m: IdealMetric, e: Edge) -> np.ndarray:
    """Table alpha[k, j] of the shift of the gluing e_j -> e_k.

    Antisymmetric with zero diagonal; every triple satisfies the cocycle
    identity alpha[i,j] + alpha[j,k] + alpha[k,i] = 0.
    """
    delta = slot_log_scales(m, e)
    return delta[None, :] - delta[:, None]


@dataclass(frozen=True)
class EdgeLocalModel:
    edge: Edge
    scales: tuple[float, ...]


def edge_local_model(m: IdealMetric, e: Edge) -> EdgeLocalModel:
    """Per-slot scales r_j with max r_j = 1 realizing the stored shifts."""
    delta = slot_log_scales(m, e)
    return EdgeLocalModel(e, tuple(np.exp(delta - delta.max())))


@dataclass(frozen=True)
class FaceChart:
    """A face realized as the ideal triangle of scale R, in the local
    model of its side-0 edge.

    ``corner_pos`` places each corner at one of the boundary points
    {0, R, INF}; ``side_transport[s]`` carries the chart onto the local
    model of side s's edge (the face lands on the x > 0 side with the
    edge on the geodesic (0, inf) oriented upward and the slot scale
    ``side_scale[s]``).
    """

    face: int
    scale: float
    corner_pos: tuple[float, float, float]
    side_scale: tuple[float, float, float]
    side_transport: tuple[Mobius, Mobius, Mobius]

    @property
    def triangle(self) -> IdealTriangle:
        return IdealTriangle(self.scale)

    def cusp_of_corner(self, corner: int) -> float:
        return self.corner_pos[corner]

    def corner_of_cusp(self, cusp: float) -> int:
        return self.corner_pos.index(cusp)


def face_chart(m: IdealMetric, face: int) -> FaceChart:
    if face in m._charts:
        return m._charts[face]
    c = m.complex
    eid0, pos0 = c.edge_of_slot(face, 0)
    slot0 = c.edges[eid0].slots[pos0]
    scales0 = edge_local_model(m, c.edges[eid0]).scales
    R = scales0[pos0]

    corner_pos = [0.0, 0.0, 0.0]
    corner_pos[slot0.tail_corner] = 0.0
    corner_pos[slot0.head_corner] = INF
    corner_pos[2] = R
    tri = IdealTriangle(R)

    side_scale, side_transport = [], []
    for s in range(3):
        eid, pos = c.edge_of_slot(face, s)
        slot = c.edges[eid].slots[pos]
        a = edge_local_model(m, c.edges[eid]).scales[pos]
        d_tail = corner_pos[slot.tail_corner]
        d_head = corner_pos[slot.head_corner]
        cs = side_to_standard_position(tri, d_tail, d_head)
        side_scale.append(a)
        side_transport.append(Mobius.scaling(a / R).compose(cs))

    chart = FaceChart(face, R, tuple(corner_pos), tuple(side_scale),
                      tuple(side_transport))
    m._charts[face] = chart
    return chart


# -- completeness ---------------------------------------------------------

def _delta_coeff_columns(c: Complex):
    """Column index of each stored shift in the global parameter vector."""
    cols, k = {}, 0
    for e in c.edges:
        for j in range(1, e.degree):
            cols[(e.id, j)] = k
            k += 1
    return cols, k


def residual_structure(c: Complex):
    """Linear map from stored shifts to completeness residuals.

    Returns (rows, matrix) where rows[i] = (vertex id, cycle index within
    that vertex) and matrix has one row per basis cycle of a link graph.
    Each residual is the signed sum of shift parameters along the cycle.
    """
    if hasattr(c, "_residual_structure"):
        return c._residual_structure
    cols, ncols = _delta_coeff_columns(c)
    rows_meta, rows = [], []
    for v in c.vertices:
        g = link_graph(c, v)
        for k, cyc in enumerate(cycle_basis(g)):
            seq = cycle_node_sequence(g, cyc)
            coeff = np.zeros(ncols)
            steps = list(cyc)
            for i in range(len(steps)):
                ai, d = steps[i]
                aj, dj = steps[(i + 1) % len(steps)]
                arc_in, arc_out = g.arcs[ai], g.arcs[aj]
                z = seq[i + 1]
                node = g.nodes[z]
                slot_in = arc_in.slot_b if d > 0 else arc_in.slot_a
                slot_out = arc_out.slot_a if dj > 0 else arc_out.slot_b
                assert slot_in[0] == node.edge_id == slot_out[0]
                eps = node.eps
                # residual term eps * (delta_in - delta_out) with
                # delta_j = -stored_{j} for incidence position j >= 1
                if slot_in[1] >= 1:
                    coeff[cols[(node.edge_id, slot_in[1])]] -= eps
                if slot_out[1] >= 1:
                    coeff[cols[(node.edge_id, slot_out[1])]] += eps
            rows_meta.append((v.id, k))
            rows.append(coeff)
    mat = np.array(rows) if rows else np.zeros((0, ncols))
    c._residual_structure = (rows_meta, mat)
    return c._residual_structure


def residual_vector(m: IdealMetric) -> np.ndarray:
    _, mat = residual_structure(m.complex)
    return mat @ m.stored_vector()


def completeness_residuals(m: IdealMetric):
    """All (vertex id, basis-cycle index, residual) triples."""
    rows, _ = residual_structure(m.complex)
    vals = residual_vector(m)
    return [(vid, k, float(r)) for (vid, k), r in zip(rows, vals)]


def is_complete(m: IdealMetric, tol: float = 1e-9) -> bool:
    vals = residual_vector(m)
    return bool(vals.size == 0 or np.max(np.abs(vals)) <= tol)


def require_complete(m: IdealMetric, tol: float = 1e-9):
    if not is_complete(m, tol):
        worst = float(np.max(np.abs(residual_vector(m))))
        raise IncompleteMetric(f"metric has completeness residual {worst:.3g}")


@dataclass(frozen=True)
class DimsResult:
    metric_dim: int
    relation_count: int
    teich_dim: int
    links_connected: bool
    e_minus_v: int

    def as_dict(self) -> dict:
        return {
            "metric_dim": self.metric_dim,
            "relations": self.relation_count,
            "teich_dim": self.teich_dim,
            "links_connected": self.links_connected,
            "e_minus_v": self.e_minus_v,
        }


def dims(c: Complex) -> DimsResult:
    """(3F - E, total link cycle rank, their difference).

    The difference equals E - V exactly when every link graph is
    connected; ``links_connected`` flags when that closed form applies.
    """
    metric_dim = 3 * c.num_triangles - c.num_edges
    assert metric_dim == sum(e.degree - 1 for e in c.edges)
    rows, _ = residual_structure(c)
    relation_count = len(rows)
    connected = all(
        len(link_components(link_graph(c, v))) == 1 for v in c.vertices)
    return DimsResult(metric_dim, relation_count, metric_dim - relation_count,
                      connected, c.num_edges - c.num_vertices)


def random_metric(c: Complex, rng: np.random.Generator,
                  complete: bool = True, scale: float = 1.0) -> IdealMetric:
    """Stored shifts i.i.d. uniform in [-scale, scale]; optionally the
    least-squares projection onto the completeness subspace."""
    _, mat = residual_structure(c)
    s = rng.uniform(-scale, scale, size=mat.shape[1])
    if complete and mat.shape[0]:
        correction, *_ = np.linalg.lstsq(mat, mat @ s, rcond=None)
        s = s - correction
    return IdealMetric.from_vector(c, s)


# -- vertex local models --------------------------------------------------

_REFLECT = Mobius.reflection_across_imaginary_axis()


@dataclass(frozen=True)
class CornerModel:
    """One face corner developed around the vertex: the developing map
    carries the face chart onto rho * T + translation with the corner
    cusp at infinity."""

    face: int
    corner: int
    rho: float
    dev: Mobius
    translation: float


@dataclass(frozen=True)
class VertexLocalModel:
    vertex: Vertex
    corners: dict
    mismatches: tuple
    max_mismatch: float

    def corner_model(self, face: int, corner: int) -> CornerModel:
        return self.corners[(face, corner)]


def _developed_width(dev: Mobius, chart: FaceChart, corner: int):
    """(rho, left x) of the developed triangle of a corner whose cusp is
    carried to infinity by ``dev``."""
    others = [dev.apply_boundary(chart.corner_pos[k])
              for k in range(3) if k != corner]
    lo, hi = sorted(others)
    width = hi - lo
    assert math.isfinite(width) and width > 0
    return width, lo


def vertex_local_model(m: IdealMetric, v: Vertex,
                       tol: float = 1e-9) -> VertexLocalModel:
    """Develop all face corners at v with the corner cusp at infinity.

    Propagation follows a breadth-first spanning tree of the link's
    arc-adjacency; the remaining adjacencies must match in scale (the
    completeness conditions at v), and the per-node log-scale mismatches
    are reported.  Raises IncompleteAtVertex when any exceeds ``tol``.
    """
    if v.id in m._vertex_models:
        model = m._vertex_models[v.id]
        if model.max_mismatch > tol:
            raise IncompleteAtVertex(v.id, model.max_mismatch)
        return model

    c = m.complex
    g = link_graph(c, v)
    # A "port" is one endpoint of an arc: (arc index, 0 for node_a /
    # 1 for node_b).  Self-identified corners can put both ports of one
    # arc on the same node, and each port carries its own slot.
    ports_at_node: dict[int, list[tuple[int, int]]] = {
        i: [] for i in range(len(g.nodes))}
    for ai, a in enumerate(g.arcs):
        ports_at_node[a.node_a].append((ai, 0))
        ports_at_node[a.node_b].append((ai, 1))

    def port_transport(ai: int, port: int) -> Mobius:
        arc = g.arcs[ai]
        eid, pos = arc.slot_a if port == 0 else arc.slot_b
        slot = c.edges[eid].slots[pos]
        return face_chart(m, arc.face).side_transport[slot.side]

    dev: dict[int, Mobius] = {}
    for root in range(len(g.arcs)):
        if root in dev:
            continue
        chart = face_chart(m, g.arcs[root].face)
        cusp = chart.corner_pos[g.arcs[root].corner]
        dev[root] = cusp_symmetry(chart.triangle, cusp)
        queue = [root]
        while queue:
            ai = queue.pop(0)
            arc = g.arcs[ai]
            for port, z in ((0, arc.node_a), (1, arc.node_b)):
                t_a = port_transport(ai, port)
                step = dev[ai].compose(t_a.inverse()).compose(_REFLECT)
                for bj, port_b in ports_at_node[z]:
                    if bj in dev:
                        continue
                    dev[bj] = step.compose(port_transport(bj, port_b))
                    queue.append(bj)

    # widths before normalization
    rho = {}
    for ai, a in enumerate(g.arcs):
        chart = face_chart(m, a.face)
        rho[ai], _ = _developed_width(dev[ai], chart, a.corner)

    # per-node scale consistency: log rho + eps * delta(slot) constant
    mismatches = []
    worst = 0.0
    for z, node in enumerate(g.nodes):
        vals = []
        delta = slot_log_scales(m, c.edges[node.edge_id])
        # from the development recurrence, log rho - eps * delta(slot) is
        # the same for every port at this node exactly when the shift
        # relations through the node hold
        for ai, port in ports_at_node[z]:
            ref = g.arcs[ai].slot_a if port == 0 else g.arcs[ai].slot_b
            vals.append(math.log(rho[ai]) - node.eps * delta[ref[1]])
        spread = max(vals) - min(vals) if vals else 0.0
        mismatches.append((z, spread))
        worst = max(worst, spread)

    rho_max = max(rho.values())
    norm = Mobius.scaling(1.0 / rho_max)
    corners = {}
    for ai, a in enumerate(g.arcs):
        d = norm.compose(dev[ai])
        chart = face_chart(m, a.face)
        w, left = _developed_width(d, chart, a.corner)
        corners[(a.face, a.corner)] = CornerModel(a.face, a.corner, w, d, left)

    model = VertexLocalModel(v, corners, tuple(mismatches), worst)
    m._vertex_models[v.id] = model
    if worst > tol:
        raise IncompleteAtVertex(v.id, worst)
    return model


def corner_scales(m: IdealMetric, tol: float = 1e-9):
    """Vertex-model scale of every (face, corner), over all vertices."""
    out = {}
    for v in m.complex.vertices:
        model = vertex_local_model(m, v, tol=tol)
        for key, cm in model.corners.items():
            out[key] = cm.rho
    return out
