"""Layered graph construction from stacks of thermal frames.

The pipeline per build layer: threshold the frame into a 3D point layer,
merge with the retained cloud, prune high-redundancy points (restricted to a
window of recent layers), tetrahedralize with 3D Delaunay, keep tetrahedra
with circumradius below alpha, then classify vertices as bottom / top / side
/ interior.  Vertices and edges of the filtered complex form the graph the
diffusion models run on.

Point redundancy is scored by the scale-invariant density
``d(v) = (3 / (8 pi)) * sum_j ||v - v_j||^-2``; pruning repeatedly removes
the highest-density removable point, recomputing densities after each
removal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .frames import SequenceManifest, ThermalFrame, ThermalSequence
from .validation import DegenerateGeometryError, ValidationError, as_float_array

VERTEX_CLASSES = ("bottom", "top", "side", "interior")
BOTTOM, TOP, SIDE, INTERIOR = range(4)

SID_COEFF = 3.0 / (8.0 * math.pi)

# 6 vertex pairs of a tetrahedron
_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
_TET_FACES = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]


@dataclass
class PointCloud3:
    """3D points in mm with their build-layer indices."""

    points: np.ndarray    # (n, 3) float64
    layer_of: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.points = as_float_array(self.points, "points", ndim=2)
        self.layer_of = np.asarray(self.layer_of, dtype=np.int64)
        if self.points.shape[1] != 3:
            raise ValidationError("points must be (n, 3)")
        if self.layer_of.shape[0] != self.points.shape[0]:
            raise ValidationError("layer_of must match point count")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("points contain non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class SimplicialComplex3:
    """Tetrahedra over a shared vertex array; faces and edges are derived."""

    vertices: np.ndarray     # (n, 3); indices in tetrahedra refer into this
    tetrahedra: np.ndarray   # (t, 4) int64, each row sorted

    def edge_set(self) -> np.ndarray:
        """Unique undirected edges (i < j) of all tetrahedra, lexicographic."""
        if len(self.tetrahedra) == 0:
            return np.empty((0, 2), dtype=np.int64)
        pairs = np.concatenate([self.tetrahedra[:, [a, b]] for a, b in _TET_EDGES])
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    def used_vertices(self) -> np.ndarray:
        return np.unique(self.tetrahedra)

    def boundary_faces(self) -> np.ndarray:
        """Triangles incident to exactly one tetrahedron."""
        if len(self.tetrahedra) == 0:
            return np.empty((0, 3), dtype=np.int64)
        faces = np.concatenate([self.tetrahedra[:, f] for f in _TET_FACES])
        faces.sort(axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        return uniq[counts == 1]


def threshold_frame(frame: ThermalFrame, manifest: SequenceManifest) -> np.ndarray:
    """Points (x, y, z) in mm for pixels strictly above the part threshold."""
    rows, cols = np.nonzero(frame.values > manifest.threshold_K)
    pts = np.empty((rows.size, 3))
    pts[:, 0] = cols * manifest.pixel_pitch_mm
    pts[:, 1] = rows * manifest.pixel_pitch_mm
    pts[:, 2] = frame.layer_index * manifest.layer_height_mm
    return pts


def _inverse_square_distances(points: np.ndarray) -> np.ndarray:
    """Pairwise ||vi - vj||^-2 with zero diagonal; errors on coincident points."""
    diff = points[:, None, :] - points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    n = points.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(d2[off] == 0.0):
        raise ValidationError("coincident points")
    inv = np.zeros_like(d2)
    inv[off] = 1.0 / d2[off]
    return inv


def sid_values(points: np.ndarray) -> np.ndarray:
    """Scale-invariant density of every point of the cloud."""
    points = as_float_array(points, "points", ndim=2)
    if points.shape[0] == 1:
        return np.zeros(1)
    return SID_COEFF * _inverse_square_distances(points).sum(axis=1)


def scale_invariant_density(cloud: PointCloud3 | np.ndarray, i: int) -> float:
    points = cloud.points if isinstance(cloud, PointCloud3) else cloud
    return float(sid_values(points)[i])


def removable_mask(layer_of: np.ndarray, top_k: int) -> np.ndarray:
    """Points within the top_k most recent layers; older layers are protected."""
    return layer_of > layer_of.max() - top_k


def prune(cloud: PointCloud3, target_count: int, top_k: int) -> PointCloud3:
    """Remove highest-density points from the top-layer window.

    Repeatedly deletes the removable point of maximal scale-invariant
    density (ties broken by lowest index), recomputing densities after each
    removal, until exactly ``target_count`` removable points remain.
    Densities are downdated incrementally; the O(n^2)-per-step recompute is
    kept as a test oracle.
    """
    n = len(cloud)
    removable = removable_mask(cloud.layer_of, top_k)
    population = int(removable.sum())
    if target_count > population:
        raise ValidationError(
            f"target_count {target_count} exceeds removable population {population}"
        )
    if target_count == population:
        return cloud
    inv = _inverse_square_distances(cloud.points)
    score = inv.sum(axis=1)
    alive = np.ones(n, dtype=bool)
    for _ in range(population - target_count):
        cand = alive & removable
        masked = np.where(cand, score, -np.inf)
        victim = int(np.argmax(masked))  # argmax returns the lowest tied index
        alive[victim] = False
        score -= inv[:, victim]
    return PointCloud3(cloud.points[alive], cloud.layer_of[alive])


def tetrahedron_volumes(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    a = points[tets[:, 1]] - points[tets[:, 0]]
    b = points[tets[:, 2]] - points[tets[:, 0]]
    c = points[tets[:, 3]] - points[tets[:, 0]]
    return np.abs(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0


def circumradii_squared(points: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Squared circumsphere radius per tetrahedron.

    Flat cospherical slivers (the degenerate cells a lattice produces) get
    the minimal containing sphere of their circumcircle via a least-squares
    center, so they filter like their proper neighbors instead of
    vanishing; genuinely broken tetrahedra come out infinite."""
    if len(tets) == 0:
        return np.empty(0)
    p0 = points[tets[:, 0]]
    rhs = np.empty((len(tets), 3))
    mat = np.empty((len(tets), 3, 3))
    for k in range(3):
        pk = points[tets[:, k + 1]]
        mat[:, k, :] = 2.0 * (pk - p0)
        rhs[:, k] = np.einsum("ij,ij->i", pk, pk) - np.einsum("ij,ij->i", p0, p0)
    r2 = np.full(len(tets), np.inf)
    scale = float(np.abs(mat).max()) or 1.0
    good = np.abs(np.linalg.det(mat)) > 1e-9 * scale**3
    if np.any(good):
        centers = np.linalg.solve(mat[good], rhs[good][..., None])[..., 0]
        d = centers - p0[good]
        r2[good] = np.einsum("ij,ij->i", d, d)
    for t in np.nonzero(~good)[0]:
        center, residual, _, _ = np.linalg.lstsq(mat[t], rhs[t], rcond=None)
        misfit = np.linalg.norm(mat[t] @ center - rhs[t])
        if misfit <= 1e-6 * scale * max(1.0, np.linalg.norm(center)):
            r2[t] = float(np.sum((center - points[tets[t, 0]]) ** 2))
    return r2


def delaunay3(points: np.ndarray, jitter_mm: float = 1e-7,
              jitter_seed: int = 0) -> SimplicialComplex3:
    """Delaunay tetrahedralization (Qhull-backed) with symbolic-style jitter.

    The topology is computed on coordinates perturbed by a seeded uniform
    jitter of ``jitter_mm`` so that cospherical configurations (lattice
    stacks) triangulate without zero-volume slivers or merged-facet
    artifacts; the returned complex keeps the original coordinates.  For
    generic inputs the jitter is far below point spacing and does not
    change the triangulation.  Raises :class:`DegenerateGeometryError` for
    fewer than 4 points or irreparably degenerate (e.g. coplanar) sets.
    """
    points = as_float_array(points, "points", ndim=2)
    n = points.shape[0]
    if n < 4:
        raise DegenerateGeometryError("degenerate point set: need at least 4 points")
    rng = np.random.default_rng(jitter_seed)
    jittered = points
    if jitter_mm > 0:
        jittered = points + rng.uniform(-jitter_mm, jitter_mm, size=points.shape)
    try:
        tri = Delaunay(jittered)
    except QhullError as exc:
        raise DegenerateGeometryError(f"degenerate point set: {exc}")
    tets = np.sort(np.asarray(tri.simplices, dtype=np.int64), axis=1)
    # positivity holds in the jittered construction coordinates; dropping
    # cells that are flat in the original coordinates would break the
    # face-to-face structure the boundary classification relies on
    scale = float(np.ptp(points, axis=0).max())
    if tetrahedron_volumes(points, tets).max() <= 1e-14 * scale**3:
        raise DegenerateGeometryError("degenerate point set: no proper tetrahedra")
    order = np.lexsort(tets.T[::-1])
    return SimplicialComplex3(vertices=points, tetrahedra=tets[order])


def alpha_filter(complex3: SimplicialComplex3, alpha: float) -> SimplicialComplex3:
    """Keep exactly the tetrahedra with circumradius < alpha."""
    if alpha < 0:
        raise ValidationError("alpha must be >= 0 or inf")
    if np.isinf(alpha):
        return SimplicialComplex3(complex3.vertices, complex3.tetrahedra.copy())
    r2 = circumradii_squared(complex3.vertices, complex3.tetrahedra)
    keep = r2 < alpha * alpha
    return SimplicialComplex3(complex3.vertices, complex3.tetrahedra[keep])


def median_edge_length(complex3: SimplicialComplex3) -> float:
    edges = complex3.edge_set()
    if len(edges) == 0:
        raise DegenerateGeometryError("complex has no edges")
    d = complex3.vertices[edges[:, 0]] - complex3.vertices[edges[:, 1]]
    return float(np.median(np.linalg.norm(d, axis=1)))


def classify_vertices(complex3: SimplicialComplex3, layer_of: np.ndarray) -> np.ndarray:
    """Class code per vertex of the complex (unused vertices get interior).

    Lowest layer wins bottom, highest present layer wins top, remaining
    vertices on a boundary face win side; priority bottom > top > side.
    """
    layer_of = np.asarray(layer_of, dtype=np.int64)
    classes = np.full(layer_of.shape[0], INTERIOR, dtype=np.int8)
    used = complex3.used_vertices()
    if used.size == 0:
        return classes
    on_boundary = np.zeros(layer_of.shape[0], dtype=bool)
    bf = complex3.boundary_faces()
    if len(bf):
        on_boundary[np.unique(bf)] = True
    classes[used[on_boundary[used]]] = SIDE
    lo = layer_of[used].min()
    hi = layer_of[used].max()
    top_used = used[layer_of[used] == hi]
    classes[top_used] = TOP
    bottom_used = used[layer_of[used] == lo]
    classes[bottom_used] = BOTTOM
    return classes


@dataclass
class LayeredGraph:
    """Vertices with positions, classes, and densities; undirected edges."""

    positions: np.ndarray    # (n, 3) mm
    layer: np.ndarray        # (n,) int64
    classes: np.ndarray      # (n,) int8, codes into VERTEX_CLASSES
    sid: np.ndarray          # (n,) float64
    edge_index: np.ndarray   # (e, 2) int64, i < j, lexicographic
    edge_length: np.ndarray  # (e,) float64, mm

    def __post_init__(self):
        if not np.all(self.edge_length > 0):
            raise ValidationError("edge with non-positive length")
        if len(self.edge_index) and not np.all(
                self.edge_index[:, 0] < self.edge_index[:, 1]):
            raise ValidationError("edges must be stored with i < j")

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    @property
    def top_layer(self) -> int:
        return int(self.layer.max())

    def top_layer_mask(self) -> np.ndarray:
        """Vertices of the current surface layer; these are the observable ones."""
        return self.layer == self.layer.max()

    def interior_mask(self) -> np.ndarray:
        return self.classes == INTERIOR

    def is_connected(self) -> bool:
        n = self.n_vertices
        if n == 0:
            return True
        adj = [[] for _ in range(n)]
        for i, j in self.edge_index:
            adj[i].append(j)
            adj[j].append(i)
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        return bool(seen.all())


@dataclass
class GraphBuildParams:
    prune_target: int = 400
    top_k: int = 5
    alpha_mm: float | None = None   # None: 1.5 x median Delaunay edge length
    alpha_factor: float = 1.5
    jitter_mm: float = 1e-7
    jitter_seed: int = 0
    require_connected: bool = True


def construct_graph(cloud: PointCloud3, params: GraphBuildParams) -> LayeredGraph:
    """Delaunay + alpha filter + classification over an already-pruned cloud."""
    cx = delaunay3(cloud.points, params.jitter_mm, params.jitter_seed)
    alpha = params.alpha_mm
    if alpha is None:
        alpha = params.alpha_factor * median_edge_length(cx)
    fcx = alpha_filter(cx, alpha)
    used = fcx.used_vertices()
    if used.size == 0:
        raise DegenerateGeometryError("alpha filter removed every tetrahedron")
    classes = classify_vertices(fcx, cloud.layer_of)
    sid = sid_values(cloud.points)

    remap = np.full(len(cloud), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    edges = remap[fcx.edge_set()]
    d = cloud.points[used][edges[:, 0]] - cloud.points[used][edges[:, 1]]
    graph = LayeredGraph(
        positions=cloud.points[used],
        layer=cloud.layer_of[used],
        classes=classes[used],
        sid=sid[used],
        edge_index=edges,
        edge_length=np.linalg.norm(d, axis=1),
    )
    if params.require_connected and not graph.is_connected():
        raise ValidationError(
            "constructed graph is disconnected; increase alpha or prune less"
        )
    return graph


def accrete_layer(cloud: PointCloud3, new_points: np.ndarray, new_layer_index: int,
                  params: GraphBuildParams) -> tuple[PointCloud3, LayeredGraph]:
    """Add one layer of points and rebuild the graph.

    Points below the top-k layer window are inherited untouched; pruning,
    triangulation, and classification rerun on the union.  Returns the new
    retained cloud (input of the next accretion) and the new graph.
    """
    if new_layer_index != cloud.layer_of.max() + 1:
        raise ValidationError(
            f"accretion expects layer {cloud.layer_of.max() + 1}, got {new_layer_index}"
        )
    union = PointCloud3(
        np.concatenate([cloud.points, new_points]),
        np.concatenate([cloud.layer_of,
                        np.full(len(new_points), new_layer_index, dtype=np.int64)]),
    )
    population = int(removable_mask(union.layer_of, params.top_k).sum())
    pruned = prune(union, min(params.prune_target, population), params.top_k)
    return pruned, construct_graph(pruned, params)


def build_layered_graphs(sequence: ThermalSequence,
                         params: GraphBuildParams) -> dict[int, LayeredGraph]:
    """Construct the accreted graph per build layer of a sequence.

    Each layer's point set comes from its first frame.  A single layer of
    points is planar, so the earliest graph covers the first two layers;
    the returned dict maps each layer index from the second onward to the
    graph of everything printed up to that layer.
    """
    layers = sequence.layers()
    if len(layers) < 2:
        raise ValidationError("need at least two layers to build a 3D graph")
    manifest = sequence.manifest
    layer_points = {
        li: threshold_frame(sequence.frames_for_layer(li)[0], manifest)
        for li in layers
    }
    for li in layers:
        if len(layer_points[li]) == 0:
            raise ValidationError(f"layer {li}: no pixels above threshold")

    first, second = layers[0], layers[1]
    cloud = PointCloud3(
        np.concatenate([layer_points[first], layer_points[second]]),
        np.concatenate([
            np.full(len(layer_points[first]), first, dtype=np.int64),
            np.full(len(layer_points[second]), second, dtype=np.int64),
        ]),
    )
    population = int(removable_mask(cloud.layer_of, params.top_k).sum())
    cloud = prune(cloud, min(params.prune_target, population), params.top_k)
    graphs = {second: construct_graph(cloud, params)}
    for li in layers[2:]:
        cloud, graph = accrete_layer(cloud, layer_points[li], li, params)
        graphs[li] = graph
    return graphs


def save_graph(graph: LayeredGraph, path: str) -> None:
    """Plain-text graph format: header, vertex lines, edge lines."""
    n_layers = len(np.unique(graph.layer))
    with open(path, "w") as fh:
        fh.write(f"vertices {graph.n_vertices} edges {graph.n_edges} layers {n_layers}\n")
        for i in range(graph.n_vertices):
            x, y, z = (float(v) for v in graph.positions[i])
            fh.write(f"{i} {x!r} {y!r} {z!r} "
                     f"{VERTEX_CLASSES[graph.classes[i]]} {float(graph.sid[i])!r} "
                     f"{graph.layer[i]}\n")
        for e in range(graph.n_edges):
            i, j = graph.edge_index[e]
            fh.write(f"{i} {j} {float(graph.edge_length[e])!r}\n")


def load_graph(path: str) -> LayeredGraph:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 6 or header[0] != "vertices" or header[2] != "edges" \
                or header[4] != "layers":
            raise ValidationError(f"{path}: bad graph header")
        n, e = int(header[1]), int(header[3])
        positions = np.empty((n, 3))
        layer = np.empty(n, dtype=np.int64)
        classes = np.empty(n, dtype=np.int8)
        sid = np.empty(n)
        for k in range(n):
            parts = fh.readline().split()
            if len(parts) != 7:
                raise ValidationError(f"{path}: bad vertex line {k}")
            idx = int(parts[0])
            positions[idx] = [float(parts[1]), float(parts[2]), float(parts[3])]
            classes[idx] = VERTEX_CLASSES.index(parts[4])
            sid[idx] = float(parts[5])
            layer[idx] = int(parts[6])
        edge_index = np.empty((e, 2), dtype=np.int64)
        edge_length = np.empty(e)
        for k in range(e):
            parts = fh.readline().split()
            if len(parts) != 3:
                raise ValidationError(f"{path}: bad edge line {k}")
            edge_index[k] = [int(parts[0]), int(parts[1])]
            edge_length[k] = float(parts[2])
    return LayeredGraph(positions=positions, layer=layer, classes=classes,
                        sid=sid, edge_index=edge_index, edge_length=edge_length)
