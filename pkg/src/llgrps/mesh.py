"""Hierarchical structured triangulation of the unit square.

The coarse mesh splits [0,1]^2 into ``n_c x n_c`` squares, each cut along
the diagonal from lower-left to upper-right, giving ``2 n_c^2`` coarse
triangles.  ``refine_j`` uniform refinements (edge-midpoint quadrisection)
produce the fine mesh, which coincides with the structured mesh on
``n_c * 2^refine_j`` divisions built with the same diagonal convention.
Node numbering is row-major over the lattice, so rebuilds are bit-identical.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = ["HierMesh", "Patch", "build_hier_mesh", "build_patch"]


def _lattice_nodes(n):
    """Row-major (n+1)^2 lattice coordinates on [0,1]^2."""
    side = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(side, side)  # yy varies along axis 0
    return np.column_stack([xx.ravel(), yy.ravel()])


def _lattice_triangles(n):
    """Triangles of the structured n x n mesh, square-major, lower then upper."""
    stride = n + 1
    qx, qy = np.meshgrid(np.arange(n), np.arange(n))
    qx = qx.ravel()
    qy = qy.ravel()
    ll = qy * stride + qx
    lr = ll + 1
    ul = ll + stride
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    tris = np.empty((2 * n * n, 3), dtype=np.int32)
    tris[0::2] = lower
    tris[1::2] = upper
    return tris


def _lattice_edges(n):
    """Edges of the structured mesh: horizontal block, vertical, diagonal."""
    stride = n + 1
    # horizontal: (x, y)-(x+1, y), rows y = 0..n
    hx, hy = np.meshgrid(np.arange(n), np.arange(n + 1))
    h0 = hy.ravel() * stride + hx.ravel()
    horiz = np.column_stack([h0, h0 + 1])
    # vertical: (x, y)-(x, y+1)
    vx, vy = np.meshgrid(np.arange(n + 1), np.arange(n))
    v0 = vy.ravel() * stride + vx.ravel()
    vert = np.column_stack([v0, v0 + stride])
    # diagonal: (x, y)-(x+1, y+1), one per square
    dx, dy = np.meshgrid(np.arange(n), np.arange(n))
    d0 = dy.ravel() * stride + dx.ravel()
    diag = np.column_stack([d0, d0 + stride + 1])
    return np.vstack([horiz, vert, diag]).astype(np.int32)


@dataclass
class HierMesh:
    """Coarse triangulation plus its uniformly refined fine mesh.

    Attributes
    ----------
    n_c : int
        Coarse divisions per side; coarse mesh size H = 1/n_c.
    refine_j : int
        Number of uniform refinements; fine mesh size h = H / 2^refine_j.
    fine_nodes, fine_triangles, fine_edges : ndarray
        Fine lattice geometry/topology (triangles counterclockwise).
    coarse_triangles, coarse_edges : ndarray
        Topology on the coarse lattice (indices into ``coarse_nodes``).
    child_map : ndarray, shape (n_coarse_tri, 4^refine_j)
        Fine triangles contained in each coarse triangle.
    """

    n_c: int
    refine_j: int
    fine_nodes: np.ndarray
    fine_triangles: np.ndarray
    fine_edges: np.ndarray
    coarse_nodes: np.ndarray
    coarse_triangles: np.ndarray
    coarse_edges: np.ndarray
    child_map: np.ndarray
    boundary_node: np.ndarray
    boundary_edge: np.ndarray
    # derived adjacency, filled in by build_hier_mesh
    _node_tri_ptr: np.ndarray = field(repr=False, default=None)
    _node_tri_idx: np.ndarray = field(repr=False, default=None)
    _coarse_vertex_tris: list = field(repr=False, default=None)

    @property
    def n_fine_nodes(self):
        return self.fine_nodes.shape[0]

    @property
    def n_fine_triangles(self):
        return self.fine_triangles.shape[0]

    @property
    def n_coarse_triangles(self):
        return self.coarse_triangles.shape[0]

    @property
    def fine_divisions(self):
        return self.n_c * 2**self.refine_j

    @property
    def H(self):
        return 1.0 / self.n_c

    @property
    def h(self):
        return 1.0 / self.fine_divisions

    def triangles_of_node(self, node):
        """Fine triangles incident to a fine node."""
        lo, hi = self._node_tri_ptr[node], self._node_tri_ptr[node + 1]
        return self._node_tri_idx[lo:hi]

    def coarse_edge_fine_nodes(self, edge):
        """Fine nodes along coarse edge ``edge``, endpoint to endpoint."""
        n_c = self.n_c
        r = 2**self.refine_j
        stride = self.fine_divisions + 1
        n_h = n_c * (n_c + 1)
        n_v = n_c * (n_c + 1)
        if edge < n_h:  # horizontal
            cx = edge % n_c
            cy = edge // n_c
            start = (cy * r) * stride + cx * r
            return start + np.arange(r + 1, dtype=np.int64)
        edge -= n_h
        if edge < n_v:  # vertical
            cx = edge % (n_c + 1)
            cy = edge // (n_c + 1)
            start = (cy * r) * stride + cx * r
            return start + np.arange(r + 1, dtype=np.int64) * stride
        edge -= n_v  # diagonal
        cx = edge % n_c
        cy = edge // n_c
        start = (cy * r) * stride + cx * r
        return start + np.arange(r + 1, dtype=np.int64) * (stride + 1)

    def coarse_edge_triangles(self, edge):
        """Coarse triangles adjacent to coarse edge ``edge`` (1 or 2)."""
        n_c = self.n_c
        n_h = n_c * (n_c + 1)
        n_v = n_c * (n_c + 1)
        tris = []
        if edge < n_h:  # horizontal edge at row cy
            cx = edge % n_c
            cy = edge // n_c
            if cy >= 1:
                tris.append(2 * ((cy - 1) * n_c + cx) + 1)  # upper tri below
            if cy <= n_c - 1:
                tris.append(2 * (cy * n_c + cx))  # lower tri above
        elif edge < n_h + n_v:
            e = edge - n_h
            cx = e % (n_c + 1)
            cy = e // (n_c + 1)
            if cx >= 1:
                tris.append(2 * (cy * n_c + cx - 1))  # lower tri to the left
            if cx <= n_c - 1:
                tris.append(2 * (cy * n_c + cx) + 1)  # upper tri to the right
        else:
            s = edge - n_h - n_v
            tris.extend([2 * s, 2 * s + 1])
        return np.array(sorted(tris), dtype=np.int64)


def build_hier_mesh(n_c, refine_j):
    """Build the hierarchical mesh for ``n_c`` coarse divisions, ``refine_j`` refinements."""
    if n_c < 1:
        raise ValueError(f"n_c must be a positive integer, got {n_c}")
    if refine_j < 0:
        raise ValueError(f"refine_j must be non-negative, got {refine_j}")
    n_f = n_c * 2**refine_j

    fine_nodes = _lattice_nodes(n_f)
    fine_tris = _lattice_triangles(n_f)
    fine_edges = _lattice_edges(n_f)
    coarse_nodes = _lattice_nodes(n_c)
    coarse_tris = _lattice_triangles(n_c)
    coarse_edges = _lattice_edges(n_c)

    # locate every fine triangle inside its coarse parent via its centroid
    cent = fine_nodes[fine_tris].mean(axis=1)
    sx = np.minimum((cent[:, 0] * n_c).astype(np.int64), n_c - 1)
    sy = np.minimum((cent[:, 1] * n_c).astype(np.int64), n_c - 1)
    local_upper = (cent[:, 1] * n_c - sy) > (cent[:, 0] * n_c - sx)
    parent = 2 * (sy * n_c + sx) + local_upper.astype(np.int64)
    order = np.argsort(parent, kind="stable")
    child_map = order.reshape(2 * n_c * n_c, 4**refine_j).astype(np.int32)

    x, y = fine_nodes[:, 0], fine_nodes[:, 1]
    boundary_node = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)
    emid = fine_nodes[fine_edges].mean(axis=1)
    on_side = (emid[:, 0] == 0.0) | (emid[:, 0] == 1.0) | (emid[:, 1] == 0.0) | (emid[:, 1] == 1.0)
    boundary_edge = on_side & boundary_node[fine_edges[:, 0]] & boundary_node[fine_edges[:, 1]]

    # node -> incident fine triangles (CSR layout)
    flat = fine_tris.ravel()
    tri_ids = np.repeat(np.arange(fine_tris.shape[0], dtype=np.int32), 3)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=fine_nodes.shape[0])
    ptr = np.zeros(fine_nodes.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])

    # coarse vertex -> incident coarse triangles
    n_cv = coarse_nodes.shape[0]
    vert_tris = [[] for _ in range(n_cv)]
    for t, tri in enumerate(coarse_tris):
        for v in tri:
            vert_tris[v].append(t)
    vert_tris = [np.array(v, dtype=np.int64) for v in vert_tris]

    return HierMesh(
        n_c=n_c,
        refine_j=refine_j,
        fine_nodes=fine_nodes,
        fine_triangles=fine_tris,
        fine_edges=fine_edges,
        coarse_nodes=coarse_nodes,
        coarse_triangles=coarse_tris,
        coarse_edges=coarse_edges,
        child_map=child_map,
        boundary_node=boundary_node,
        boundary_edge=boundary_edge,
        _node_tri_ptr=ptr,
        _node_tri_idx=tri_ids[order],
        _coarse_vertex_tris=vert_tris,
    )


@dataclass
class Patch:
    """Layered neighborhood of one measurement's support.

    ``free_nodes`` are fine nodes where a localized basis function may be
    nonzero (patch interior plus the part of the patch boundary lying on
    the domain boundary); ``dirichlet_nodes`` carry homogeneous Dirichlet
    conditions on the interior patch boundary.
    """

    center: int
    kind: str
    layer: int
    coarse_elements: np.ndarray
    fine_triangles: np.ndarray
    fine_nodes: np.ndarray
    free_nodes: np.ndarray
    dirichlet_nodes: np.ndarray
    saturated: bool


def _grow_by_vertex(mesh, elems):
    """One layer of coarse-triangle growth by shared vertices."""
    mask = np.zeros(mesh.n_coarse_triangles, dtype=bool)
    mask[elems] = True
    verts = np.unique(mesh.coarse_triangles[elems].ravel())
    for v in verts:
        mask[mesh._coarse_vertex_tris[v]] = True
    return np.flatnonzero(mask)


def patch_seed(mesh, center, kind):
    """Coarse elements of the layer-0 patch for one measurement."""
    if kind == "volume":
        if not 0 <= center < mesh.n_coarse_triangles:
            raise IndexError(f"volume measurement index {center} out of range")
        return np.array([center], dtype=np.int64)
    if kind == "edge":
        if not 0 <= center < mesh.coarse_edges.shape[0]:
            raise IndexError(f"edge measurement index {center} out of range")
        return mesh.coarse_edge_triangles(center)
    raise ValueError(f"unknown measurement kind {kind!r}")


def build_patch(mesh, center, kind, layer):
    """Build the ``layer``-layer patch around measurement ``center``.

    Layer growth is by coarse-vertex adjacency; element sets are nested in
    ``layer`` and saturate to the whole domain for ``layer`` large enough.
    """
    if layer < 0:
        raise ValueError("layer must be non-negative")
    elems = patch_seed(mesh, center, kind)
    for _ in range(layer):
        if elems.size == mesh.n_coarse_triangles:
            break
        elems = _grow_by_vertex(mesh, elems)

    tris = mesh.child_map[elems].ravel()
    in_patch = np.zeros(mesh.n_fine_triangles, dtype=bool)
    in_patch[tris] = True
    nodes = np.unique(mesh.fine_triangles[tris].ravel())

    saturated = elems.size == mesh.n_coarse_triangles
    if saturated:
        free = nodes
        dirich = np.empty(0, dtype=nodes.dtype)
    else:
        touches_outside = np.array(
            [not in_patch[mesh.triangles_of_node(n)].all() for n in nodes]
        )
        free = nodes[~touches_outside]
        dirich = nodes[touches_outside]

    return Patch(
        center=center,
        kind=kind,
        layer=layer,
        coarse_elements=elems,
        fine_triangles=np.sort(tris),
        fine_nodes=nodes,
        free_nodes=free,
        dirichlet_nodes=dirich,
        saturated=saturated,
    )
