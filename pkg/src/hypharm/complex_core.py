"""Finite 2-dimensional simplicial complexes with oriented edge gluings.

A complex is described by its number of triangles and a partition of the
3F oriented edge slots into gluing classes.  Sides are indexed so that
side k of a triangle joins corners k and (k+1) mod 3; a slot's intrinsic
direction runs from corner k to corner k+1, and its orientation sign
records whether that direction agrees with the chosen orientation of the
glued edge.  Edges, vertices (corner identification closure), link
graphs and their cycle bases are derived here.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import (
    ComplexSpecError,
    DisconnectedComplex,
    EmptyPartitionClass,
    InconsistentOrientation,
)

TAIL, HEAD = 0, 1


@dataclass(frozen=True)
class EdgeSlot:
    triangle: int
    side: int
    orientation: int

    @property
    def tail_corner(self) -> int:
        return self.side if self.orientation > 0 else (self.side + 1) % 3

    @property
    def head_corner(self) -> int:
        return (self.side + 1) % 3 if self.orientation > 0 else self.side

    def end_at_corner(self, corner: int) -> int:
        if corner == self.tail_corner:
            return TAIL
        if corner == self.head_corner:
            return HEAD
        raise ValueError("corner not incident to this slot")


@dataclass(frozen=True)
class Edge:
    id: int
    slots: tuple[EdgeSlot, ...]

    @property
    def degree(self) -> int:
        return len(self.slots)

    @property
    def singular(self) -> bool:
        return self.degree >= 3


@dataclass(frozen=True)
class Vertex:
    id: int
    corners: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class LinkNode:
    edge_id: int
    end: int
    eps: int  # +1 when the edge points towards the vertex (end == HEAD)


@dataclass(frozen=True)
class LinkArc:
    """A face corner at the vertex, joining the ends of its two sides.

    slot_a/slot_b are (edge_id, position-in-incidence-list) references of
    the sides meeting at the corner: side (corner+2)%3 at node_a and side
    corner at node_b.
    """

    face: int
    corner: int
    node_a: int
    node_b: int
    slot_a: tuple[int, int]
    slot_b: tuple[int, int]


@dataclass(frozen=True)
class LinkGraph:
    vertex: Vertex
    nodes: tuple[LinkNode, ...]
    arcs: tuple[LinkArc, ...]


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


class Complex:
    """Validated complex with derived edges, vertices and lookup tables.

    Instances are immutable by convention; identity-based hashing makes
    them safe cache keys.
    """

    def __init__(self, num_triangles: int, edge_classes):
        if num_triangles < 1:
            raise ComplexSpecError("need at least one triangle")
        self.num_triangles = int(num_triangles)

        classes = []
        for cls in edge_classes:
            slots = []
            for entry in cls:
                entry = tuple(entry)
                if len(entry) == 2:
                    t, side, orient = entry[0], entry[1], 1
                elif len(entry) == 3:
                    t, side, orient = entry
                else:
                    raise ComplexSpecError(f"bad slot entry {entry!r}")
                if not (0 <= t < self.num_triangles) or side not in (0, 1, 2):
                    raise ComplexSpecError(f"slot out of range: {entry!r}")
                if orient not in (-1, 1):
                    raise InconsistentOrientation(
                        f"orientation sign must be +-1, got {orient!r}")
                slots.append(EdgeSlot(int(t), int(side), int(orient)))
            if not slots:
                raise EmptyPartitionClass("edge class with no slots")
            classes.append(tuple(slots))

        seen: dict[tuple[int, int], int] = {}
        for ci, slots in enumerate(classes):
            for s in slots:
                key = (s.triangle, s.side)
                if key in seen:
                    if seen[key] == ci:
                        raise InconsistentOrientation(
                            f"slot {key} glued to itself")
                    raise ComplexSpecError(f"slot {key} in two classes")
                seen[key] = ci
        expected = 3 * self.num_triangles
        if len(seen) != expected:
            raise ComplexSpecError(
                f"partition covers {len(seen)} of {expected} slots")

        classes.sort(key=lambda slots: min((s.triangle, s.side) for s in slots))
        self.edges: tuple[Edge, ...] = tuple(
            Edge(i, slots) for i, slots in enumerate(classes))

        self.slot_lookup: dict[tuple[int, int], tuple[int, int]] = {}
        for e in self.edges:
            for pos, s in enumerate(e.slots):
                self.slot_lookup[(s.triangle, s.side)] = (e.id, pos)

        self._check_connected()
        self._derive_vertices()
        self._links: dict[int, LinkGraph] = {}

    # -- construction helpers -------------------------------------------

    def _check_connected(self):
        uf = _UnionFind(range(self.num_triangles))
        for e in self.edges:
            first = e.slots[0].triangle
            for s in e.slots[1:]:
                uf.union(first, s.triangle)
        roots = {uf.find(t) for t in range(self.num_triangles)}
        if len(roots) > 1:
            raise DisconnectedComplex(
                f"face adjacency graph has {len(roots)} components")

    def _derive_vertices(self):
        corners = [(t, c) for t in range(self.num_triangles) for c in range(3)]
        uf = _UnionFind(corners)
        for e in self.edges:
            ref = e.slots[0]
            for s in e.slots[1:]:
                uf.union((ref.triangle, ref.tail_corner),
                         (s.triangle, s.tail_corner))
                uf.union((ref.triangle, ref.head_corner),
                         (s.triangle, s.head_corner))
        groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for c in corners:
            groups.setdefault(uf.find(c), []).append(c)
        ordered = sorted(groups.values(), key=lambda g: min(g))
        self.vertices: tuple[Vertex, ...] = tuple(
            Vertex(i, tuple(sorted(g))) for i, g in enumerate(ordered))
        self.corner_to_vertex: dict[tuple[int, int], int] = {}
        for v in self.vertices:
            for c in v.corners:
                self.corner_to_vertex[c] = v.id

        self.edge_ends: dict[int, tuple[int, int]] = {}
        for e in self.edges:
            tails = {self.corner_to_vertex[(s.triangle, s.tail_corner)]
                     for s in e.slots}
            heads = {self.corner_to_vertex[(s.triangle, s.head_corner)]
                     for s in e.slots}
            assert len(tails) == 1 and len(heads) == 1
            self.edge_ends[e.id] = (tails.pop(), heads.pop())

    # -- queries ---------------------------------------------------------

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def edge_of_slot(self, triangle: int, side: int) -> tuple[int, int]:
        """(edge id, position in the incidence list) of a slot."""
        return self.slot_lookup[(triangle, side)]

    def to_spec(self) -> dict:
        return {
            "triangles": self.num_triangles,
            "edge_classes": [
                {"slots": [[s.triangle, s.side, s.orientation]
                           for s in e.slots]}
                for e in self.edges
            ],
        }


def build_complex(spec: dict) -> Complex:
    """Validate a structured complex description and derive everything."""
    try:
        triangles = spec["triangles"]
        classes = [cls["slots"] for cls in spec["edge_classes"]]
    except (KeyError, TypeError) as exc:
        raise ComplexSpecError(f"malformed complex spec: {exc}") from exc
    return Complex(triangles, classes)


def link_graph(c: Complex, v: Vertex) -> LinkGraph:
    """Graph with a node per edge-end at v and an arc per face corner."""
    if v.id in c._links:
        return c._links[v.id]

    node_index: dict[tuple[int, int], int] = {}
    nodes: list[LinkNode] = []
    for e in c.edges:
        for end, vid in zip((TAIL, HEAD), c.edge_ends[e.id]):
            if vid == v.id:
                node_index[(e.id, end)] = len(nodes)
                nodes.append(LinkNode(e.id, end, +1 if end == HEAD else -1))

    arcs: list[LinkArc] = []
    for (t, corner) in v.corners:
        side_a = (corner + 2) % 3
        side_b = corner
        ref_a = c.edge_of_slot(t, side_a)
        ref_b = c.edge_of_slot(t, side_b)
        slot_a = c.edges[ref_a[0]].slots[ref_a[1]]
        slot_b = c.edges[ref_b[0]].slots[ref_b[1]]
        na = node_index[(ref_a[0], slot_a.end_at_corner(corner))]
        nb = node_index[(ref_b[0], slot_b.end_at_corner(corner))]
        arcs.append(LinkArc(t, corner, na, nb, ref_a, ref_b))

    g = LinkGraph(v, tuple(nodes), tuple(arcs))
    c._links[v.id] = g
    return g


def link_components(g: LinkGraph) -> list[list[int]]:
    """Connected components of the link, as sorted node index lists."""
    adj: dict[int, list[int]] = {i: [] for i in range(len(g.nodes))}
    for a in g.arcs:
        adj[a.node_a].append(a.node_b)
        adj[a.node_b].append(a.node_a)
    seen: set[int] = set()
    comps = []
    for start in range(len(g.nodes)):
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        comps.append(sorted(comp))
    return comps


def cycle_basis(g: LinkGraph) -> list[tuple[tuple[int, int], ...]]:
    """Fundamental cycles of the link graph.

    Each cycle is a tuple of steps (arc index, direction); direction +1
    traverses the arc from node_a to node_b.  The basis has one cycle per
    non-tree arc of a spanning forest, so its size is
    #arcs - #nodes + #components.
    """
    n = len(g.nodes)
    adj: dict[int, list[tuple[int, int]]] = {i: [] for i in range(n)}
    for ai, a in enumerate(g.arcs):
        adj[a.node_a].append((ai, a.node_b))
        if a.node_b != a.node_a:
            adj[a.node_b].append((ai, a.node_a))

    parent: dict[int, tuple[int, int] | None] = {}
    tree_arcs: set[int] = set()
    order: list[int] = []
    for root in range(n):
        if root in parent:
            continue
        parent[root] = None
        queue = [root]
        while queue:
            x = queue.pop(0)
            order.append(x)
            for ai, y in sorted(adj[x]):
                if ai in tree_arcs or g.arcs[ai].node_a == g.arcs[ai].node_b:
                    continue
                if y not in parent:
                    parent[y] = (x, ai)
                    tree_arcs.add(ai)
                    queue.append(y)

    def path_to_root(x: int) -> list[tuple[int, int, int]]:
        """Steps (arc, direction, next node) from x up to its root."""
        steps = []
        while parent[x] is not None:
            p, ai = parent[x]
            direction = +1 if g.arcs[ai].node_a == x else -1
            steps.append((ai, direction, p))
            x = p
        return steps

    cycles = []
    for ai, a in enumerate(g.arcs):
        if ai in tree_arcs:
            continue
        if a.node_a == a.node_b:
            cycles.append(((ai, +1),))
            continue
        pa = path_to_root(a.node_a)
        pb = path_to_root(a.node_b)
        nodes_a = [a.node_a] + [s[2] for s in pa]
        nodes_b = [a.node_b] + [s[2] for s in pb]
        common = set(nodes_a) & set(nodes_b)
        # walk each path until the first common node
        ia = next(i for i, x in enumerate(nodes_a) if x in common)
        lca = nodes_a[ia]
        ib = nodes_b.index(lca)
        steps = [(ai, +1)]
        steps += [(s[0], s[1]) for s in pb[:ib]]
        steps += [(s[0], -s[1]) for s in reversed(pa[:ia])]
        cycles.append(tuple(steps))
    return cycles


def cycle_node_sequence(g: LinkGraph, cycle) -> list[int]:
    """Node indices visited by a cycle, starting and ending at the same
    node (the endpoint list has length len(cycle) + 1)."""
    first_arc, first_dir = cycle[0]
    a = g.arcs[first_arc]
    node = a.node_a if first_dir > 0 else a.node_b
    seq = [node]
    for ai, d in cycle:
        arc = g.arcs[ai]
        src, dst = (arc.node_a, arc.node_b) if d > 0 else (arc.node_b, arc.node_a)
        if src != seq[-1]:
            raise ValueError("broken cycle")
        seq.append(dst)
    if seq[0] != seq[-1]:
        raise ValueError("cycle does not close")
    return seq


def counts(c: Complex):
    """(F, E, V, singular edge ids); checks sum of degrees equals 3F."""
    total_degree = sum(e.degree for e in c.edges)
    assert total_degree == 3 * c.num_triangles
    singular = [e.id for e in c.edges if e.singular]
    return c.num_triangles, c.num_edges, c.num_vertices, singular


# -- stock complexes used throughout the tests and docs ------------------

def double_triangle(twist: bool = False) -> Complex:
    """Two triangles glued side i to side i.

    With ``twist`` False every gluing matches the sides head-to-head,
    giving the thrice-punctured sphere (F=2, E=3, V=3, rigid).  With
    ``twist`` True the second triangle's slots are reversed, giving the
    once-punctured torus (V=1) whose complete structures form a
    2-parameter family.
    """
    sign = -1 if twist else 1
    classes = [[(0, i, 1), (1, i, sign)] for i in range(3)]
    return Complex(2, classes)


def isolated_triangle() -> Complex:
    """One triangle, no gluings (three singleton edge classes)."""
    return Complex(1, [[(0, i, 1)] for i in range(3)])


def book_complex() -> Complex:
    """Three pages sharing a singular binding edge of degree three.

    Side 0 of every page is glued into one class; side 1 of page i closes
    against side 2 of page i+1 (mod 3).
    """
    classes = [[(0, 0, 1), (1, 0, 1), (2, 0, 1)]]
    for i in range(3):
        classes.append([(i, 1, 1), ((i + 1) % 3, 2, 1)])
    return Complex(3, classes)
