"""Cusp-truncated triangulations of a complex with a complete metric.

Every face is meshed in its own chart (the face as an ideal triangle of
scale R).  Each cusp is cut along the horocycle of level Y_cut in the
vertex local model of its corner; in the chart coordinate where that
cusp sits at infinity, the corner region between the horocycle through
the two adjacent distinguished points (height R) and the cut (height
Y_cut * R / rho) is meshed as a stack of horocyclic rows closed against
the prescribed edge samples by "zipper" strips, and the central region
is filled by rows between the altitude arcs meeting at the face center.

Nodes on a geodesic side are placed at shared per-edge-class parameters,
so identification across gluings is exact by construction, and node
positions depend only on the cut level, the target spacing and the seed
sets, which makes successive truncations nest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .complex_core import Complex
from .errors import MeshQualityFailure
from .halfplane import (
    ALTITUDE_ARC_LENGTH,
    IdealTriangle,
    Mobius,
    Region,
    cusp_symmetry,
    distinguished_points,
    geodesic_between,
    horoball_level,
    membership,
)
from .metric import IdealMetric, corner_scales, face_chart, require_complete

INTERIOR, EDGE_NODE, CUT_NODE = 0, 1, 2

#: log-distance below which a regular sample is dropped next to a
#: required one, to avoid sliver rows.
_MERGE_BAND = 0.5

#: same-side sample pairs closer than this (in units of target_h) bound
#: genuinely thin slabs of the geometry; their cells are exempt from the
#: isotropic min-angle gate.
_THIN_PAIR = 0.6


@dataclass
class MeshConfig:
    target_h: float = 0.1
    cut_level: float = 2.0
    min_angle_deg: float = 20.0
    min_area: float = 1e-14
    quadrature_order: int = 1

    def __post_init__(self):
        if not (0 < self.target_h <= 0.25):
            raise ValueError("target_h must lie in (0, 0.25]")
        if self.cut_level < 2.0:
            raise ValueError("cut_level must be at least 2")
        if self.quadrature_order not in (1, 3):
            raise ValueError("quadrature_order must be 1 or 3")


@dataclass
class EdgeSamples:
    """Shared node parameters of one edge class, sorted ascending."""

    edge_id: int
    y: np.ndarray
    is_cut: np.ndarray  # endpoints at the current truncation
    y_bot: float
    y_top: float


@dataclass
class EdgeNodeClass:
    edge_id: int
    sample_idx: int
    y: float
    fixed: bool
    members: tuple  # (face, node id, side)


class _FaceBuilder:
    def __init__(self, face):
        self.face = face
        self.pos: list[complex] = []
        self.kind: list[int] = []
        self.side: list[int] = []
        self.sample_idx: list[int] = []
        self.y_model: list[float] = []
        self.on_cut: list[bool] = []
        self.corner: list[int] = []
        self.tris: list[tuple[int, int, int]] = []
        self.exempt: list[bool] = []

    def add_node(self, z: complex, kind: int, side=-1, sample=-1,
                 y=math.nan, on_cut=False, corner=-1) -> int:
        self.pos.append(complex(z))
        self.kind.append(kind)
        self.side.append(side)
        self.sample_idx.append(sample)
        self.y_model.append(y)
        self.on_cut.append(on_cut)
        self.corner.append(corner)
        return len(self.pos) - 1

    def add_tri(self, i, j, k, exempt=False, min_area=1e-14):
        p, q, r = self.pos[i], self.pos[j], self.pos[k]
        area2 = (q.real - p.real) * (r.imag - p.imag) - \
                (q.imag - p.imag) * (r.real - p.real)
        if area2 < 0:
            j, k = k, j
            area2 = -area2
        if area2 <= 2 * min_area:
            raise MeshQualityFailure(
                f"degenerate triangle in face {self.face}: area {area2 / 2:.3g}")
        self.tris.append((i, j, k))
        self.exempt.append(exempt)


@dataclass
class FaceMesh:
    face: int
    nodes: np.ndarray           # (n, 2) chart coordinates
    triangles: np.ndarray       # (m, 3) counterclockwise
    kind: np.ndarray
    side: np.ndarray
    sample_idx: np.ndarray
    y_model: np.ndarray
    on_cut: np.ndarray
    corner: np.ndarray
    tri_exempt: np.ndarray
    side_nodes: tuple           # per side: node ids aligned with samples
    boundary_cells: dict        # side -> per-interval triangle id

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def points(self) -> np.ndarray:
        return self.nodes[:, 0] + 1j * self.nodes[:, 1]


@dataclass
class ComplexMesh:
    complex: Complex
    metric: IdealMetric
    cfg: MeshConfig
    cut_level: float
    faces: list
    classes: list
    samples: dict               # edge id -> EdgeSamples
    corner_rho: dict            # (face, corner) -> vertex-model scale
    corner_cut: dict            # (face, corner) -> cut height in cusp coords
    class_seeds: dict = field(default_factory=dict)
    cap_seeds: dict = field(default_factory=dict)

    def face_count(self) -> int:
        return len(self.faces)

    def total_nodes(self) -> int:
        return sum(fm.num_nodes for fm in self.faces)


def truncated_face_area(mesh: ComplexMesh, face: int) -> float:
    """Exact hyperbolic area of the truncated face: pi minus the three
    cusp bands, each of area rho / Y_cut."""
    return math.pi - sum(
        mesh.corner_rho[(face, k)] / mesh.cut_level for k in range(3))


def total_truncated_area(mesh: ComplexMesh) -> float:
    return sum(truncated_face_area(mesh, f)
               for f in range(mesh.complex.num_triangles))


def point_in_truncated_face(mesh: ComplexMesh, face: int, z: complex,
                            tol: float = 1e-9):
    """Membership of a chart point in the truncated face."""
    chart = face_chart(mesh.metric, face)
    reg, which = membership(chart.triangle, z, tol=tol)
    if reg is Region.OUTSIDE:
        return Region.OUTSIDE
    for k in range(3):
        cusp = chart.corner_pos[k]
        lvl = horoball_level(chart.triangle, cusp, z)
        if lvl > mesh.corner_cut[(face, k)] * (1 + tol) + tol:
            return Region.OUTSIDE
    return reg


# -- edge sampling --------------------------------------------------------

def _graded_ladder(a0: float, h: float, req) -> list[float]:
    """Geometric ladder anchored at a0 with step h over the range of the
    required values, which are always included.

    Regular rungs within the merge band of a required value are dropped,
    and log-midpoints are inserted into any interval that ends up wider
    than 1.25 h, capping the spacing irregularity.  Deterministic given
    (a0, h, req), which keeps successive truncations nested."""
    req = _dedupe_log(sorted(req))
    lo, hi = req[0], req[-1]
    k_lo = math.ceil((math.log(lo / a0)) / h + 1e-9)
    k_hi = math.floor((math.log(hi / a0)) / h - 1e-9)
    vals = []
    for k in range(k_lo, k_hi + 1):
        y = a0 * math.exp(k * h)
        if all(abs(math.log(y / r)) >= _MERGE_BAND * h for r in req):
            vals.append(y)
    vals = sorted(vals + req)
    out = [vals[0]]
    for v in vals[1:]:
        gap = math.log(v / out[-1])
        if gap > 1.25 * h:
            out.append(math.sqrt(out[-1] * v))
        out.append(v)
    return out


def _edge_sample_values(m: IdealMetric, rho, eid: int, h: float, Y: float,
                        seeds) -> EdgeSamples:
    from .metric import edge_local_model
    c = m.complex
    e = c.edges[eid]
    scales = edge_local_model(m, e).scales
    slot0 = e.slots[0]
    a0 = scales[0]
    rho_tail = rho[(slot0.triangle, slot0.tail_corner)]
    rho_head = rho[(slot0.triangle, slot0.head_corner)]
    y_bot = a0 * rho_tail / Y
    y_top = a0 * Y / rho_head
    # slot-independence of the truncated range
    for pos, s in enumerate(e.slots):
        yb = scales[pos] * rho[(s.triangle, s.tail_corner)] / Y
        yt = scales[pos] * Y / rho[(s.triangle, s.head_corner)]
        assert abs(math.log(yb / y_bot)) < 1e-9 and abs(math.log(yt / y_top)) < 1e-9

    required = {y_bot, y_top}
    required.update(a for a in scales if y_bot < a < y_top)
    required.update(s for s in seeds if y_bot < s < y_top)
    allv = np.array(_graded_ladder(a0, h, required))
    is_cut = np.zeros(len(allv), dtype=bool)
    is_cut[0] = is_cut[-1] = True
    return EdgeSamples(eid, allv, is_cut, y_bot, y_top)


def _dedupe_log(vals, tol=1e-9):
    out = []
    for v in vals:
        if not out or abs(math.log(v / out[-1])) > tol:
            out.append(v)
    return out


# -- zipper strips --------------------------------------------------------

def _zip_strip(builder: _FaceBuilder, A, B, keyA, keyB,
               exempt_fn=None, min_area=1e-14):
    """Triangulate the strip between node chains A and B.

    Chains are given as (node id, w-position) lists ordered by increasing
    progress key.  Advances the chain whose next key is smaller, which
    tiles the strip when the chains bound a crossing-free corridor.
    """
    i = j = 0
    while i < len(A) - 1 or j < len(B) - 1:
        can_a = i < len(A) - 1
        can_b = j < len(B) - 1
        if can_a and can_b:
            adv_a = keyA[i + 1] <= keyB[j + 1]
        else:
            adv_a = can_a
        if adv_a:
            tri = (A[i][0], B[j][0], A[i + 1][0])
            wpts = (A[i][1], B[j][1], A[i + 1][1])
            i += 1
        else:
            tri = (A[i][0], B[j][0], B[j + 1][0])
            wpts = (A[i][1], B[j][1], B[j + 1][1])
            j += 1
        exempt = bool(exempt_fn(wpts)) if exempt_fn else False
        builder.add_tri(*tri, exempt=exempt, min_area=min_area)


# -- the main build -------------------------------------------------------

def build_mesh(c: Complex, m_sigma: IdealMetric, cfg: MeshConfig,
               class_seeds: dict | None = None,
               cap_seeds: dict | None = None) -> ComplexMesh:
    """Triangulate all truncated faces with watertight edge classes."""
    require_complete(m_sigma)
    h = cfg.target_h
    Y = cfg.cut_level
    rho = corner_scales(m_sigma)
    class_seeds = dict(class_seeds or {})
    cap_seeds = dict(cap_seeds or {})

    samples = {
        e.id: _edge_sample_values(m_sigma, rho, e.id, h, Y,
                                  class_seeds.get(e.id, ()))
        for e in c.edges
    }

    corner_cut = {}
    for f in range(c.num_triangles):
        chart = face_chart(m_sigma, f)
        for k in range(3):
            corner_cut[(f, k)] = Y * chart.scale / rho[(f, k)]

    builders = []
    for f in range(c.num_triangles):
        builders.append(_build_face(c, m_sigma, f, cfg, samples, rho,
                                    corner_cut, cap_seeds))

    faces = [_finalize_face(b) for b in builders]

    classes = []
    for e in c.edges:
        es = samples[e.id]
        for i, y in enumerate(es.y):
            members = []
            for s in e.slots:
                node = faces[s.triangle].side_nodes[s.side][i]
                members.append((s.triangle, int(node), s.side))
            classes.append(EdgeNodeClass(e.id, i, float(y),
                                         bool(es.is_cut[i]), tuple(members)))

    mesh = ComplexMesh(c, m_sigma, cfg, Y, faces, classes, samples, rho,
                       corner_cut,
                       class_seeds={e.id: tuple(sorted(
                           set(class_seeds.get(e.id, ())) |
                           {samples[e.id].y_bot, samples[e.id].y_top}))
                           for e in c.edges},
                       cap_seeds={key: tuple(sorted(
                           set(cap_seeds.get(key, ())) | {corner_cut[key]}))
                           for key in corner_cut})
    _validate_mesh(mesh)
    return mesh


def exhaust(mesh: ComplexMesh, next_Y: float) -> ComplexMesh:
    """Extend the truncation outward; the old nodes reappear verbatim."""
    if next_Y < mesh.cut_level:
        raise ValueError("next_Y must not shrink the truncated region")
    cfg = MeshConfig(mesh.cfg.target_h, next_Y, mesh.cfg.min_angle_deg,
                     mesh.cfg.min_area, mesh.cfg.quadrature_order)
    return build_mesh(mesh.complex, mesh.metric, cfg,
                      class_seeds=mesh.class_seeds, cap_seeds=mesh.cap_seeds)


def node_correspondence(old: ComplexMesh, new: ComplexMesh):
    """Per face, map old node ids to new node ids by exact position.

    Positions of persisting nodes are reproduced bit-for-bit by the
    deterministic construction, so exact matching is safe.
    """
    out = []
    for f_old, f_new in zip(old.faces, new.faces):
        table = {}
        for i, (x, y) in enumerate(f_new.nodes):
            table[(float(x), float(y))] = i
        idx = np.empty(f_old.num_nodes, dtype=int)
        for i, (x, y) in enumerate(f_old.nodes):
            key = (float(x), float(y))
            if key not in table:
                raise AssertionError(
                    f"old node {i} of face {f_old.face} missing in refinement")
            idx[i] = table[key]
        out.append(idx)
    return out


def _strip_levels(R: float, h: float, y_cut: float, caps) -> list[float]:
    """Row heights above the distinguished-point horocycle (exclusive)."""
    req = {R, y_cut}
    req.update(cp for cp in caps if R < cp < y_cut)
    return _graded_ladder(R, h, req)[1:]


def _row_xs(R: float, h: float, v: float, dipped: bool = False):
    """Interior x positions of the strip row at height v; the second
    entry flags ladder rows (single midline node in the narrow cusp).

    Dipped rows get an odd count so a node sits exactly on the kink of
    the altitude-arc envelope at x = R/2."""
    s = math.sinh(h) * v
    W = R - 2 * s
    if W <= 0.5 * s:
        return [0.5 * R], True
    m = max(2, math.ceil(W / s) + 1)
    if dipped:
        if m % 2 == 0:
            m += 1
        m = max(3, m)
    return list(np.linspace(s, R - s, m)), False


def _arc_points(chart, foot: complex, center: complex, n: int):
    """Points along the altitude arc from a distinguished edge point to
    the face center, equally spaced in hyperbolic arclength."""
    circ = geodesic_between(foot, center)
    if circ is None:
        ys = np.exp(np.linspace(math.log(foot.imag), math.log(center.imag),
                                n + 1))
        return [complex(foot.real, y) for y in ys]
    c0, rad = circ
    th_f = math.atan2(foot.imag, foot.real - c0)
    th_c = math.atan2(center.imag, center.real - c0)
    sf = math.log(math.tan(th_f / 2.0))
    sc = math.log(math.tan(th_c / 2.0))
    ss = np.linspace(sf, sc, n + 1)
    th = 2.0 * np.arctan(np.exp(ss))
    return [complex(c0 + rad * math.cos(t), rad * math.sin(t)) for t in th]


def _build_face(c, m, f, cfg, samples, rho, corner_cut, cap_seeds):
    h = cfg.target_h
    chart = face_chart(m, f)
    R = chart.scale
    tri = chart.triangle
    b = _FaceBuilder(f)
    sh = math.sinh(h)

    # side sample nodes (shared edge classes)
    side_nodes = []
    for s in range(3):
        eid, pos = c.edge_of_slot(f, s)
        slot = c.edges[eid].slots[pos]
        es = samples[eid]
        tinv = chart.side_transport[s].inverse()
        ids = []
        last = len(es.y) - 1
        for i, y in enumerate(es.y):
            z = tinv(1j * y)
            cut = bool(es.is_cut[i])
            corner = -1
            if cut:
                corner = slot.tail_corner if i == 0 else slot.head_corner
            ids.append(b.add_node(z, EDGE_NODE, side=s, sample=i, y=float(y),
                                  on_cut=cut, corner=corner))
        side_nodes.append(ids)
    b.side_node_ids = side_nodes

    center, feet = distinguished_points(tri)
    center_id = b.add_node(center, INTERIOR)

    # canonical altitude-arc nodes per side (endpoints are the side's
    # distinguished point and the center)
    n_arc = max(2, round(ALTITUDE_ARC_LENGTH / h))
    arc_ids = []
    for s in range(3):
        foot = feet[_foot_index_of_side(chart, s)]
        fid = _nearest_side_node(b, side_nodes[s], foot)
        pts = _arc_points(chart, foot, center, n_arc)
        ids = [fid]
        for p in pts[1:-1]:
            ids.append(b.add_node(p, INTERIOR))
        ids.append(center_id)
        arc_ids.append(ids)

    # corner regions
    for corner in range(3):
        cusp = chart.corner_pos[corner]
        g = cusp_symmetry(tri, cusp)
        y_cut = corner_cut[(f, corner)]
        caps = cap_seeds.get((f, corner), ())
        _build_corner_region(b, c, f, chart, cfg, g, corner, y_cut, caps,
                             side_nodes, arc_ids, center_id, sh)
    return b


def _foot_index_of_side(chart, s: int) -> int:
    """Index in distinguished_points(...)[1] of side s's foot."""
    ends = {chart.corner_pos[s], chart.corner_pos[(s + 1) % 3]}
    R = chart.scale
    if ends == {0.0, math.inf}:
        return 0
    if ends == {R, math.inf}:
        return 1
    return 2


def _nearest_side_node(b: _FaceBuilder, ids, target: complex) -> int:
    best = min(ids, key=lambda i: abs(b.pos[i] - target))
    assert abs(b.pos[best] - target) <= 1e-9 * max(1.0, abs(target)), \
        "side sampling must contain the distinguished point"
    b.pos[best] = target  # snap to the exact closed form
    return best


def _sides_at_corner(chart, corner: int):
    """The two sides incident to the corner, ordered (left, right) in the
    cusp coordinate where the corner sits at infinity."""
    cusp = chart.corner_pos[corner]
    incident = []
    for s in range(3):
        ends = (chart.corner_pos[s], chart.corner_pos[(s + 1) % 3])
        if cusp in ends:
            other = ends[1] if ends[0] == cusp else ends[0]
            incident.append((s, other))
    assert len(incident) == 2
    g = cusp_symmetry(chart.triangle, cusp)
    out = {}
    for s, other in incident:
        x = g.apply_boundary(other)
        out[round(x, 9)] = s
    xs = sorted(out)
    assert len(xs) == 2
    return out[xs[0]], out[xs[1]]  # side at x=0, side at x=R


_DIP = 1.0 - math.sqrt(3.0) / 2.0  # depth of the face center below the feet


def _floor_height(R: float, x: float) -> float:
    """Height of the altitude-arc envelope bounding the region below."""
    x = min(max(x, 0.0), R)
    left = math.sqrt(max(R * R - x * x, 0.0))
    right = math.sqrt(max(R * R - (R - x) * (R - x), 0.0))
    return max(left, right)


def _row_shape(R: float, u: float, x: float) -> float:
    """Height over x of the row whose side level is u.

    Rows near the feet horocycle dip towards the altitude arcs (the row
    at u = R is the arc chain itself); the dip amplitude decays linearly
    and rows are horocyclic once u >= R * (1 + DIP)."""
    amp = max(0.0, _DIP * R - (u - R))
    if amp == 0.0:
        return u
    return u - amp * (R - _floor_height(R, x)) / (_DIP * R)


def _build_corner_region(b, c, f, chart, cfg, g, corner, y_cut, caps,
                         side_nodes, arc_ids, center_id, sh):
    h = cfg.target_h
    R = chart.scale
    ginv = g.inverse()
    s_left, s_right = _sides_at_corner(chart, corner)
    v_onset = R / (2.5 * sh)

    def exempt_fn(wpts):
        return min(p.imag for p in wpts) >= 0.75 * v_onset

    # boundary chains: transported side samples with height >= R
    def boundary_chain(s):
        chain = []
        for nid in side_nodes[s]:
            w = g(b.pos[nid])
            if w.imag >= R * (1 - 1e-9):
                chain.append((nid, w))
        chain.sort(key=lambda t: t[1].imag)
        assert abs(chain[0][1].imag - R) <= 1e-6 * max(1.0, R), \
            "lowest boundary node must be the distinguished point"
        assert abs(chain[-1][1].imag - y_cut) <= 1e-6 * max(1.0, y_cut), \
            "highest boundary node must be the cut crossing"
        return chain

    left = boundary_chain(s_left)
    right = boundary_chain(s_right)

    # row 0: the canonical chain along the two altitude arcs
    arcs_l = [(nid, g(b.pos[nid])) for nid in arc_ids[s_left]]
    arcs_r = [(nid, g(b.pos[nid])) for nid in arc_ids[s_right]]
    floor_row = arcs_l + arcs_r[-2::-1]  # foot_l .. C .. foot_r
    assert floor_row[0][0] == left[0][0] and floor_row[-1][0] == right[0][0]

    rows = [floor_row]
    levels = _strip_levels(R, h, y_cut, caps)
    for v in levels:
        dipped = v < R * (1.0 + _DIP)
        xs, _ladder = _row_xs(R, h, v, dipped)
        is_cut_row = abs(v - y_cut) <= 1e-12 * y_cut
        row = []
        for x in xs:
            w = complex(x, _row_shape(R, v, x))
            kind = CUT_NODE if is_cut_row else INTERIOR
            nid = b.add_node(ginv(w), kind, on_cut=is_cut_row,
                             corner=corner if is_cut_row else -1)
            row.append((nid, w))
        rows.append(row)

    # rails exclude the floor row (its ends are the feet, which anchor
    # the side chains themselves)
    rail_left = [r[0] for r in rows[1:]]
    rail_right = [r[-1] for r in rows[1:]]

    def key_im(chain):
        return [t[1].imag for t in chain]

    _zip_strip(b, left, rail_left, key_im(left), key_im(rail_left),
               exempt_fn, cfg.min_area)
    _zip_strip(b, rail_right, right, key_im(rail_right), key_im(right),
               exempt_fn, cfg.min_area)
    for k in range(len(rows) - 1):
        lo, hi = rows[k], rows[k + 1]
        _zip_strip(b, lo, hi, [t[1].real for t in lo],
                   [t[1].real for t in hi], exempt_fn, cfg.min_area)


def _improve_by_flips(pos, tris, exempt, min_area, max_passes=10):
    """Lawson-style local edge flips raising the minimum angle.

    Flips the shared edge of a triangle pair whenever the alternative
    diagonal strictly improves the pair's worst angle and keeps both
    triangles positively oriented.  Deterministic: edges are visited in
    sorted order each pass."""

    def area2(i, j, k):
        p, q, r = pos[i], pos[j], pos[k]
        return ((q.real - p.real) * (r.imag - p.imag)
                - (q.imag - p.imag) * (r.real - p.real))

    def quality(i, j, k):
        return _min_angle(pos[i], pos[j], pos[k])

    for _ in range(max_passes):
        edge_map = {}
        for t, tri in enumerate(tris):
            for a, bb in ((tri[0], tri[1]), (tri[1], tri[2]),
                          (tri[2], tri[0])):
                edge_map.setdefault((min(a, bb), max(a, bb)), []).append(t)
        changed = set()
        nflips = 0
        for key in sorted(edge_map):
            ts = edge_map[key]
            if len(ts) != 2:
                continue
            t1, t2 = ts
            if t1 in changed or t2 in changed:
                continue
            a, bb = key
            d1 = next(v for v in tris[t1] if v not in key)
            d2 = next(v for v in tris[t2] if v not in key)
            if d1 == d2:
                continue
            # orient the shared edge as it appears in t1
            tri1 = tris[t1]
            k1 = tri1.index(d1)
            e1, e2 = tri1[(k1 + 1) % 3], tri1[(k1 + 2) % 3]
            new1 = (d1, e1, d2)
            new2 = (d2, e2, d1)
            if area2(*new1) <= 2 * min_area or area2(*new2) <= 2 * min_area:
                continue
            q_old = min(quality(*tris[t1]), quality(*tris[t2]))
            q_new = min(quality(*new1), quality(*new2))
            if q_new > q_old + 1e-12:
                tris[t1] = new1
                tris[t2] = new2
                ex = exempt[t1] or exempt[t2]
                exempt[t1] = exempt[t2] = ex
                changed.update((t1, t2))
                nflips += 1
        if nflips == 0:
            break


def _finalize_face(b: _FaceBuilder) -> FaceMesh:
    _improve_by_flips(b.pos, b.tris, b.exempt, 1e-14)
    nodes = np.array([[p.real, p.imag] for p in b.pos])
    fm = FaceMesh(
        face=b.face,
        nodes=nodes,
        triangles=np.array(b.tris, dtype=int),
        kind=np.array(b.kind, dtype=np.int8),
        side=np.array(b.side, dtype=np.int8),
        sample_idx=np.array(b.sample_idx, dtype=np.int32),
        y_model=np.array(b.y_model),
        on_cut=np.array(b.on_cut, dtype=bool),
        corner=np.array(b.corner, dtype=np.int8),
        tri_exempt=np.array(b.exempt, dtype=bool),
        side_nodes=tuple(np.array(ids, dtype=int)
                         for ids in b.side_node_ids),
        boundary_cells={},
    )
    _collect_boundary_cells(fm)
    return fm


def _collect_boundary_cells(fm: FaceMesh):
    """For each side, the triangle adjacent to each sample interval."""
    for s in range(3):
        ids = fm.side_nodes[s]
        order = {int(n): i for i, n in enumerate(ids)}
        cells = np.full(len(ids) - 1, -1, dtype=int)
        for t, tri in enumerate(fm.triangles):
            on = [int(n) for n in tri if int(n) in order]
            if len(on) == 2:
                i, j = sorted(order[n] for n in on)
                if j == i + 1:
                    assert cells[i] == -1, "interval with two adjacent cells"
                    cells[i] = t
        assert np.all(cells >= 0), f"side {s} interval without adjacent cell"
        fm.boundary_cells[s] = cells


def _min_angle(p, q, r):
    try:
        return min(_tri_angles(p, q, r))
    except ZeroDivisionError:
        return -1.0


def _tri_angles(p, q, r):
    out = []
    for a, bb, c in ((p, q, r), (q, r, p), (r, p, q)):
        v1, v2 = bb - a, c - a
        cosang = (v1.real * v2.real + v1.imag * v2.imag) / (abs(v1) * abs(v2))
        out.append(math.acos(max(-1.0, min(1.0, cosang))))
    return out


def _validate_mesh(mesh: ComplexMesh):
    cfg = mesh.cfg
    min_angle = math.radians(cfg.min_angle_deg)
    for fm in mesh.faces:
        pts = fm.points()
        p, q, r = (pts[fm.triangles[:, k]] for k in range(3))
        area2 = ((q.real - p.real) * (r.imag - p.imag)
                 - (q.imag - p.imag) * (r.real - p.real))
        if np.any(area2 <= 2 * cfg.min_area):
            raise MeshQualityFailure(
                f"face {fm.face}: non-positive triangle area")
        worst = math.pi
        h = cfg.target_h
        for t in np.flatnonzero(~fm.tri_exempt):
            i, j, k = fm.triangles[t]
            if _spans_thin_pair(fm, (i, j, k), h):
                continue
            worst = min(worst, min(_tri_angles(pts[i], pts[j], pts[k])))
        if worst < min_angle:
            raise MeshQualityFailure(
                f"face {fm.face}: min angle {math.degrees(worst):.2f} deg "
                f"below bound {cfg.min_angle_deg}")
        # all nodes inside the closed truncated region
        for i in range(fm.num_nodes):
            reg = point_in_truncated_face(mesh, fm.face, pts[i], tol=1e-7)
            if reg is Region.OUTSIDE:
                raise MeshQualityFailure(
                    f"face {fm.face}: node {i} outside truncated region")
    # watertightness: every member transports back to i*y exactly
    for cls in mesh.classes:
        for face, nid, side in cls.members:
            chart = face_chart(mesh.metric, face)
            z = complex(*mesh.faces[face].nodes[nid])
            w = chart.side_transport[side](z)
            if abs(w - 1j * cls.y) > 1e-9 * max(1.0, cls.y):
                raise AssertionError("edge node fails shared-parameter check")


def _spans_thin_pair(fm: FaceMesh, tri, h: float) -> bool:
    """True when two of the triangle's nodes are same-side edge samples
    closer than the thin-pair band (an anisotropic slab of the input
    geometry rather than a meshing defect)."""
    ids = [i for i in tri if fm.kind[i] == EDGE_NODE]
    for a in range(len(ids)):
        for bb in range(a + 1, len(ids)):
            i, j = ids[a], ids[bb]
            if fm.side[i] == fm.side[j]:
                gap = abs(math.log(fm.y_model[i] / fm.y_model[j]))
                if gap < _THIN_PAIR * h:
                    return True
    return False
