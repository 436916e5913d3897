"""Parametric 2D mesh builders.

Two families: a structured transfinite quad grid for the quarter plate
with a hole (rays fanning from the hole arc to the outer rectangle), and
an unstructured Delaunay pipeline for polygon-with-arcs outlines (hex
lattice seeding, exclusion band near the boundary, Laplacian smoothing,
straight-sided T6 conversion).  Curved boundaries are approximated
polygonally at the local element size.
"""

from __future__ import annotations

import numpy as np
import shapely
from scipy.spatial import Delaunay, cKDTree
from shapely.geometry import Polygon

from .errors import GeometryError
from .fe_core import Mesh

_TOL = 1e-12


# -- boundary primitives -------------------------------------------------


def _arc_points(center, r, a0, a1, n) -> np.ndarray:
    """n+1 points along the arc from angle a0 to a1 (signed sweep)."""
    t = np.linspace(a0, a1, n + 1)
    return np.column_stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)])


def _discretize_loop(primitives, h: float):
    """Sample a closed loop of ('line', p0, p1, group) / ('arc', c, r, a0, a1, group)
    primitives at spacing ~h.

    Returns (points (P,2), seg_groups list of str) where segment i joins
    point i to point (i+1) % P.
    """
    pts: list[np.ndarray] = []
    seg_groups: list[str] = []
    for prim in primitives:
        if prim[0] == "line":
            _, p0, p1, grp = prim
            p0 = np.asarray(p0, dtype=float)
            p1 = np.asarray(p1, dtype=float)
            n = max(1, int(round(np.linalg.norm(p1 - p0) / h)))
            seg = p0 + (p1 - p0) * np.linspace(0.0, 1.0, n + 1)[:, None]
        elif prim[0] == "arc":
            _, c, r, a0, a1, grp = prim
            # sweep cap 0.25 rad keeps chord midpoints within 1% of the radius;
            # the h/2 term makes the polygonal-arc area error shrink with h
            n = max(int(np.ceil(abs(a1 - a0) / 0.25)), int(np.ceil(abs(a1 - a0) * r / (0.5 * h))), 2)
            seg = _arc_points(c, r, a0, a1, n)
        else:
            raise ValueError(f"unknown primitive {prim[0]!r}")
        n = len(seg) - 1  # sub-segments in this primitive
        if pts:
            if np.linalg.norm(pts[-1] - seg[0]) > 1e-9:
                raise GeometryError("boundary primitives are not contiguous")
            seg = seg[1:]
        pts.extend(seg)
        seg_groups.extend([grp] * n)
    # close the loop: drop the duplicated final point
    if np.linalg.norm(pts[-1] - pts[0]) > 1e-9:
        raise GeometryError("boundary loop does not close")
    pts.pop()
    if len(seg_groups) != len(pts):
        raise GeometryError("internal: segment labels out of sync with loop points")
    return np.array(pts), seg_groups


def _hex_lattice(bbox, h: float) -> np.ndarray:
    """Hexagonal point lattice covering bbox at spacing h."""
    x0, y0, x1, y1 = bbox
    dy = h * np.sqrt(3.0) / 2.0
    rows = []
    y = y0 + 0.5 * dy
    row = 0
    while y < y1:
        off = 0.25 * h if row % 2 else -0.25 * h
        xs = np.arange(x0 + 0.5 * h + off, x1, h)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
        y += dy
        row += 1
    return np.vstack(rows) if rows else np.empty((0, 2))


def _triangle_mesh(loops, h: float, smooth_iters: int = 6):
    """Delaunay T3 mesh of the region bounded by `loops` (first = outer, CCW;
    rest = holes).

    Each loop is a list of primitives (see `_discretize_loop`).  Returns
    (nodes, tris, boundary_segments) with boundary_segments a dict
    group -> list of (a, b) node pairs (ordered along the walk).
    """
    loop_pts, loop_groups = [], []
    for prims in loops:
        p, g = _discretize_loop(prims, h)
        loop_pts.append(p)
        loop_groups.append(g)
    poly = Polygon(loop_pts[0], holes=[p for p in loop_pts[1:]])
    if not poly.is_valid:
        raise GeometryError("boundary loops self-intersect or overlap")
    shapely.prepare(poly)

    bpts = np.vstack(loop_pts)
    seed = _hex_lattice(poly.bounds, h)
    inside = shapely.contains_xy(poly, seed[:, 0], seed[:, 1])
    seed = seed[inside]
    if seed.size:
        d, _ = cKDTree(bpts).query(seed, workers=-1)
        seed = seed[d > 0.72 * h]
    nodes = np.vstack([bpts, seed])
    n_bnd = bpts.shape[0]

    def triangulate(pts):
        tris = Delaunay(pts).simplices
        cent = pts[tris].mean(axis=1)
        keep = shapely.contains_xy(poly, cent[:, 0], cent[:, 1])
        return tris[keep]

    tris = triangulate(nodes)
    for _ in range(smooth_iters):
        # Laplacian smoothing of interior nodes over current connectivity
        nbr_sum = np.zeros_like(nodes)
        nbr_cnt = np.zeros(len(nodes))
        for a, b in ((0, 1), (1, 2), (2, 0)):
            np.add.at(nbr_sum, tris[:, a], nodes[tris[:, b]])
            np.add.at(nbr_cnt, tris[:, a], 1.0)
            np.add.at(nbr_sum, tris[:, b], nodes[tris[:, a]])
            np.add.at(nbr_cnt, tris[:, b], 1.0)
        movable = np.arange(len(nodes)) >= n_bnd
        movable &= nbr_cnt > 0
        prop = nodes.copy()
        prop[movable] = nbr_sum[movable] / nbr_cnt[movable, None]
        ok = shapely.contains_xy(poly, prop[:, 0], prop[:, 1])
        prop[~ok] = nodes[~ok]
        nodes = prop
        tris = triangulate(nodes)

    # enforce counterclockwise orientation
    v1 = nodes[tris[:, 1]] - nodes[tris[:, 0]]
    v2 = nodes[tris[:, 2]] - nodes[tris[:, 0]]
    area2 = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    flip = area2 < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    if np.any(np.abs(area2) < 1e-14):
        raise GeometryError("degenerate triangle produced; adjust element size")

    # boundary segments by group, and verify they survived triangulation
    edge_set = set()
    for a, b in ((0, 1), (1, 2), (2, 0)):
        for e in zip(tris[:, a].tolist(), tris[:, b].tolist()):
            edge_set.add((min(e), max(e)))
    segments: dict[str, list[tuple[int, int]]] = {}
    offset = 0
    for p, g in zip(loop_pts, loop_groups):
        np_loop = p.shape[0]
        for i in range(np_loop):
            a = offset + i
            b = offset + (i + 1) % np_loop
            if (min(a, b), max(a, b)) not in edge_set:
                raise GeometryError(
                    "a boundary segment is missing from the triangulation; "
                    "use a smaller target element size"
                )
            segments.setdefault(g[i], []).append((a, b))
        offset += np_loop
    return nodes, tris, segments


def _t3_to_t6(nodes, tris, segments):
    """Insert chord-midpoint midside nodes; returns (nodes, conn6, side_sets)."""
    mid_of: dict[tuple[int, int], int] = {}
    new_pts: list[np.ndarray] = []

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in mid_of:
            mid_of[key] = len(nodes) + len(new_pts)
            new_pts.append(0.5 * (nodes[a] + nodes[b]))
        return mid_of[key]

    conn6 = np.empty((tris.shape[0], 6), dtype=np.int64)
    conn6[:, :3] = tris
    for e, (a, b, c) in enumerate(tris):
        conn6[e, 3] = midpoint(a, b)
        conn6[e, 4] = midpoint(b, c)
        conn6[e, 5] = midpoint(c, a)
    all_nodes = np.vstack([nodes, np.array(new_pts)]) if new_pts else nodes
    side_sets = {
        grp: np.array([(a, b, mid_of[(min(a, b), max(a, b))]) for a, b in segs], dtype=np.int64)
        for grp, segs in segments.items()
    }
    return all_nodes, conn6, side_sets


def delaunay_t6_mesh(loops, h: float) -> Mesh:
    """Unstructured straight-sided T6 mesh of a polygon-with-arcs region."""
    nodes, tris, segments = _triangle_mesh(loops, h)
    nodes6, conn6, side_sets = _t3_to_t6(nodes, tris, segments)
    node_sets = {
        grp: np.unique(edges.reshape(-1)) for grp, edges in side_sets.items()
    }
    return Mesh(nodes=nodes6, blocks=[("T6", conn6)], node_sets=node_sets, side_sets=side_sets)


# -- structured quarter plate ---------------------------------------------


def plate_hole_quarter_mesh(
    R: float, half_width: float, half_height: float, n_arc: int, n_rad: int, grading: float = 3.0
) -> Mesh:
    """Structured Q4 grid between the quarter hole arc and the outer rectangle.

    Rays fan from the arc (angle 0..pi/2) to the rectangle boundary; node
    spacing along each ray follows a geometric grading (finer at the hole).
    Node sets: hole, bottom (y=0), left (x=0), right (x=half_width),
    top (y=half_height).
    """
    if not (0 < R < min(half_width, half_height)):
        raise GeometryError("hole radius must be positive and inside the quarter plate")
    # one ray passes exactly through the outer corner so the fan covers the
    # full rectangle
    phi_c = np.arctan2(half_height, half_width)
    n1 = min(max(1, round(n_arc * phi_c / (np.pi / 2.0))), n_arc - 1)
    phi = np.concatenate(
        [np.linspace(0.0, phi_c, n1 + 1), np.linspace(phi_c, np.pi / 2.0, n_arc - n1 + 1)[1:]]
    )
    xi = np.linspace(0.0, 1.0, n_rad + 1)
    if grading > 1.0 + 1e-12:
        g = (grading**xi - 1.0) / (grading - 1.0)
    else:
        g = xi
    cphi, sphi = np.cos(phi), np.sin(phi)
    with np.errstate(divide="ignore"):
        t_out = np.minimum(
            np.where(cphi > _TOL, half_width / np.maximum(cphi, _TOL), np.inf),
            np.where(sphi > _TOL, half_height / np.maximum(sphi, _TOL), np.inf),
        )
    r = R + (t_out[:, None] - R) * g[None, :]  # (n_arc+1, n_rad+1)
    X = r * cphi[:, None]
    Y = r * sphi[:, None]
    # snap the outer ring onto the rectangle exactly
    X[:, -1] = np.minimum(X[:, -1], half_width)
    Y[:, -1] = np.minimum(Y[:, -1], half_height)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (n_rad + 1) + j

    conn = np.empty((n_arc * n_rad, 4), dtype=np.int64)
    e = 0
    for i in range(n_arc):
        for j in range(n_rad):
            conn[e] = (nid(i, j), nid(i, j + 1), nid(i + 1, j + 1), nid(i + 1, j))
            e += 1
    ii = np.arange(n_arc + 1)
    jj = np.arange(n_rad + 1)
    outer = np.array([nid(i, n_rad) for i in ii])
    tol = 1e-9 * max(half_width, half_height)
    node_sets = {
        "hole": np.array([nid(i, 0) for i in ii]),
        "bottom": np.array([nid(0, j) for j in jj]),
        "left": np.array([nid(n_arc, j) for j in jj]),
        "right": outer[np.abs(nodes[outer, 0] - half_width) < tol],
        "top": outer[np.abs(nodes[outer, 1] - half_height) < tol],
    }
    top = node_sets["top"]
    side_sets = {}
    if top.size > 1:
        order = np.argsort(nodes[top, 0])
        t_sorted = top[order]
        side_sets["top"] = np.column_stack([t_sorted[:-1], t_sorted[1:]])
    right = node_sets["right"]
    if right.size > 1:
        order = np.argsort(nodes[right, 1])
        r_sorted = right[order]
        side_sets["right"] = np.column_stack([r_sorted[:-1], r_sorted[1:]])
    return Mesh(nodes=nodes, blocks=[("Q4", conn)], node_sets=node_sets, side_sets=side_sets)


# -- concrete geometries ----------------------------------------------------


def l_beam_loops(H: float, W_f: float, w_f: float, h_f: float, r_f: float, hole_r: float, hole_c):
    """Primitive loop for the L-shaped section (vertical branch on the left).

    The section occupies [0, w]x[0, H] plus [0, W]x[0, h]; the re-entrant
    corner carries a fillet of radius r; the circular cutout centered on the
    branch edge carves a semicircular notch into the web.
    """
    W, w, h, r = W_f * H, w_f * H, h_f * H, r_f * H
    R = hole_r * H
    cx, cy = hole_c[0] * H, hole_c[1] * H
    if not (0 < r < min(W - w, H - h)):
        raise GeometryError("fillet radius incompatible with branch dimensions")
    if R >= w:
        raise GeometryError("hole radius exceeds the vertical branch width")
    if abs(cx - w) > 1e-12 * H:
        raise GeometryError("hole center must sit on the vertical branch edge")
    if not (h + r < cy - R and cy + R < H):
        raise GeometryError("hole overlaps the fillet or the top edge")
    fc = (w + r, h + r)  # fillet center
    return [
        [
            ("line", (0.0, 0.0), (W, 0.0), "base"),
            ("line", (W, 0.0), (W, h), "right"),
            ("line", (W, h), (w + r, h), "flange_top"),
            ("arc", fc, r, -np.pi / 2.0, -np.pi, "fillet"),
            ("line", (w, h + r), (w, cy - R), "web"),
            ("arc", (cx, cy), R, -np.pi / 2.0, -3.0 * np.pi / 2.0, "hole"),
            ("line", (w, cy + R), (w, H), "web"),
            ("line", (w, H), (0.0, H), "top"),
            ("line", (0.0, H), (0.0, 0.0), "left"),
        ]
    ]


def square_with_holes_loops(side: float, holes, edge_groups=("bottom", "right", "top", "left")):
    """Outer square plus circular hole loops; holes = [(cx, cy, r), ...]."""
    s = side
    for cx, cy, r in holes:
        if not (r < cx < s - r and r < cy < s - r):
            raise GeometryError(f"hole at ({cx}, {cy}) r={r} crosses the outer boundary")
    for i, (ax, ay, ar) in enumerate(holes):
        for bx, by, br in holes[i + 1 :]:
            if np.hypot(ax - bx, ay - by) <= ar + br:
                raise GeometryError("holes overlap")
    outer = [
        ("line", (0.0, 0.0), (s, 0.0), edge_groups[0]),
        ("line", (s, 0.0), (s, s), edge_groups[1]),
        ("line", (s, s), (0.0, s), edge_groups[2]),
        ("line", (0.0, s), (0.0, 0.0), edge_groups[3]),
    ]
    loops = [outer]
    for k, (cx, cy, r) in enumerate(holes):
        # clockwise so the loop bounds a hole
        loops.append([("arc", (cx, cy), r, 0.0, -2.0 * np.pi, f"hole{k}")])
    return loops
