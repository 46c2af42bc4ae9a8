"""Operator-adapted coarse basis functions via constrained energy minimization.

Each basis function minimizes a scalar energy (exchange form "v1" or
exchange-plus-mass form "v2") subject to unisolvence constraints against
edge or volume measurement functionals, optionally restricted to a layered
patch.  Localized problems carry homogeneous Dirichlet values on the
interior patch boundary and natural conditions where the patch meets the
domain boundary; measurement constraints whose support lies in the patch
are enforced through a saddle-point (KKT) system.
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import AssemblyContext, assemble_mass, assemble_stiffness
from .mesh import build_patch

__all__ = [
    "MeasurementSet",
    "BasisSet",
    "BasisSolveError",
    "build_measurements",
    "nodal_measurements",
    "energy_matrix",
    "solve_basis",
    "build_basis_set",
    "identity_basis",
    "decay_profile",
    "max_constraint_violation",
    "save_basis",
    "load_basis",
]

log = logging.getLogger(__name__)

PRUNE_TOL = 1e-14
KKT_RESIDUAL_TOL = 1e-10
CONSTRAINT_TOL = 1e-9

_FORM_TAGS = {"v1": 1, "v2": 2, "identity": 3}
_KIND_TAGS = {"edge": 1, "volume": 2, "nodal": 3}
_FORM_NAMES = {v: k for k, v in _FORM_TAGS.items()}
_KIND_NAMES = {v: k for k, v in _KIND_TAGS.items()}


class BasisSolveError(RuntimeError):
    """Raised when a basis saddle problem is infeasible or fails to solve."""


@dataclass
class MeasurementSet:
    """Coarse measurement functionals as sparse rows over fine nodes.

    Pairings are exact for P1 arguments: edge functionals integrate with
    composite trapezoid weights along the fine sub-edges (the 2D edge
    scaling exponent is zero), volume functionals carry sqrt(|tau|) times
    exact vertex-rule triangle quadrature.
    """

    kind: str
    matrix: sp.csr_matrix  # (count, n_fine)
    support_nodes: list  # per functional, fine nodes carrying weight

    @property
    def count(self):
        return self.matrix.shape[0]

    def pair(self, nodal):
        """Evaluate every functional against a nodal field (or stack of fields)."""
        return self.matrix @ np.asarray(nodal, dtype=np.float64).T


def build_measurements(mesh, kind):
    """Edge- or volume-based measurement functionals for a mesh."""
    n = mesh.n_fine_nodes
    rows, cols, vals = [], [], []
    supports = []
    if kind == "volume":
        pts = mesh.fine_nodes[mesh.fine_triangles]
        d1 = pts[:, 1] - pts[:, 0]
        d2 = pts[:, 2] - pts[:, 0]
        fine_area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        for t in range(mesh.n_coarse_triangles):
            children = mesh.child_map[t]
            tri_nodes = mesh.fine_triangles[children]
            w = np.zeros(n)
            np.add.at(w, tri_nodes.ravel(), np.repeat(fine_area[children] / 3.0, 3))
            nodes = np.unique(tri_nodes.ravel())
            tau_area = fine_area[children].sum()
            rows.append(np.full(nodes.size, t))
            cols.append(nodes)
            vals.append(np.sqrt(tau_area) * w[nodes])
            supports.append(nodes)
    elif kind == "edge":
        r = 2**mesh.refine_j
        for e in range(mesh.coarse_edges.shape[0]):
            nodes = mesh.coarse_edge_fine_nodes(e)
            p = mesh.fine_nodes[nodes]
            length = np.linalg.norm(p[-1] - p[0])
            w = np.full(nodes.size, length / r)
            w[0] *= 0.5
            w[-1] *= 0.5
            rows.append(np.full(nodes.size, e))
            cols.append(nodes)
            vals.append(w)
            supports.append(np.sort(nodes))
    else:
        raise ValueError(f"unknown measurement kind {kind!r}")
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(supports), n),
    )
    return MeasurementSet(kind=kind, matrix=mat, support_nodes=supports)


def nodal_measurements(mesh):
    """Point-evaluation functionals; pair with the identity basis."""
    n = mesh.n_fine_nodes
    mat = sp.identity(n, format="csr")
    return MeasurementSet(kind="nodal", matrix=mat, support_nodes=[np.array([j]) for j in range(n)])


def energy_matrix(mesh, kappa, form, context=None):
    """Scalar energy operator: "v1" = weighted stiffness, "v2" adds the mass."""
    ctx = context or AssemblyContext(mesh, kappa)
    K = assemble_stiffness(mesh, kappa, context=ctx)
    if form == "v1":
        return K
    if form == "v2":
        return (K + assemble_mass(mesh, context=ctx)).tocsr()
    raise ValueError(f"unknown variational form {form!r}")


@dataclass
class BasisSet:
    """Localized coarse basis columns over fine nodes.

    ``layer=None`` marks a saturated (global) build.  ``in_patch[i]`` lists
    the measurements whose support lay inside basis i's patch, exactly the
    constraints the column satisfies with Kronecker right-hand side.
    """

    form: str
    kind: str
    layer: int | None
    columns: sp.csc_matrix  # (n_fine, count)
    gram: np.ndarray | None = None
    in_patch: list | None = field(default=None, repr=False)

    @property
    def count(self):
        return self.columns.shape[1]

    @property
    def n_fine(self):
        return self.columns.shape[0]


def _kkt_solve(E, phi, free, cand_rows, rhs_rows, center_row):
    """Solve the patch saddle system for one or more right-hand sides.

    Rows of ``phi`` restricted to ``free`` that vanish identically are
    automatically satisfied (their support is pinned to zero) and are
    dropped; dropping the center constraint means the patch is too small.
    Returns (solutions on free nodes, kept row ids).
    """
    A = E[free][:, free].tocsc()
    P = phi[cand_rows][:, free].tocsr()
    keep = np.flatnonzero(np.diff(P.indptr) > 0)
    if center_row is not None:
        kept_ids = cand_rows[keep]
        if center_row not in kept_ids:
            raise BasisSolveError(
                f"patch too small: constraint {center_row} has no free support "
                f"(free nodes {free.size}, candidates {cand_rows.size})"
            )
    P = P[keep]
    m = P.shape[0]
    kkt = sp.bmat([[A, P.T], [P, None]], format="csc")
    try:
        lu = spla.splu(kkt)
    except RuntimeError as err:
        raise BasisSolveError(f"singular saddle system on patch: {err}") from err
    nfree = free.size
    sols = np.empty((len(rhs_rows), nfree))
    kept_ids = cand_rows[keep]
    # backward-error residual: basis columns scale like the inverse
    # measurement scaling (peaks ~ 1e4-1e5 on fine coarse grids), so a
    # plain ||r||/||b|| bottoms out above the contract even for the
    # correctly rounded solution
    kkt_scale = max(np.abs(kkt.data).max(), 1.0)
    for out_i, row_id in enumerate(rhs_rows):
        rhs = np.zeros(nfree + m)
        sel = np.flatnonzero(kept_ids == row_id)
        if sel.size:
            rhs[nfree + sel[0]] = 1.0
        x = lu.solve(rhs)

        def backward_error(y):
            r = kkt @ y - rhs
            return np.linalg.norm(r) / (kkt_scale * np.linalg.norm(y) + np.linalg.norm(rhs))

        res = backward_error(x)
        for _ in range(3):
            if res <= KKT_RESIDUAL_TOL:
                break
            x = x + lu.solve(rhs - kkt @ x)
            res = backward_error(x)
        if res > KKT_RESIDUAL_TOL:
            raise BasisSolveError(f"saddle solve residual {res:.2e} exceeds {KKT_RESIDUAL_TOL:.0e}")
        sols[out_i] = x[:nfree]
    return sols, kept_ids


def _prune_column(n, free, values, prune):
    keep = np.abs(values) > prune
    return sp.csc_matrix(
        (values[keep], (free[keep], np.zeros(keep.sum(), dtype=np.int64))), shape=(n, 1)
    )


def _candidates(meas, node_mask):
    """Measurements whose full support lies inside the masked node set."""
    return np.array(
        [j for j, nodes in enumerate(meas.support_nodes) if node_mask[nodes].all()],
        dtype=np.int64,
    )


def solve_basis(mesh, kappa, form, measurements, i, layer, context=None, prune=PRUNE_TOL):
    """Solve one localized basis problem; returns a sparse fine-space column."""
    ctx = context or AssemblyContext(mesh, kappa)
    E = energy_matrix(mesh, kappa, form, context=ctx)
    patch = build_patch(mesh, i, measurements.kind, layer)
    mask = np.zeros(mesh.n_fine_nodes, dtype=bool)
    mask[patch.fine_nodes] = True
    cand = _candidates(measurements, mask)
    sols, _ = _kkt_solve(E, measurements.matrix, patch.free_nodes, cand, [i], center_row=i)
    return _prune_column(mesh.n_fine_nodes, patch.free_nodes, sols[0], prune)


def build_basis_set(mesh, kappa, form, measurements, layer=None, context=None, prune=PRUNE_TOL):
    """Build all basis columns for one (form, measurement) family.

    ``layer=None`` solves the global (saturated-patch) problems, sharing a
    single factorization across all right-hand sides.  Per-column solves
    are independent; ordering does not matter.
    """
    ctx = context or AssemblyContext(mesh, kappa)
    E = energy_matrix(mesh, kappa, form, context=ctx)
    n = mesh.n_fine_nodes
    count = measurements.count
    cols = []
    in_patch = []
    if layer is None:
        free = np.arange(n)
        all_rows = np.arange(count)
        sols, _ = _kkt_solve(E, measurements.matrix, free, all_rows, list(range(count)), center_row=None)
        for i in range(count):
            cols.append(_prune_column(n, free, sols[i], prune))
            in_patch.append(all_rows)
    else:
        for i in range(count):
            patch = build_patch(mesh, i, measurements.kind, layer)
            mask = np.zeros(n, dtype=bool)
            mask[patch.fine_nodes] = True
            cand = _candidates(measurements, mask)
            sols, _ = _kkt_solve(E, measurements.matrix, patch.free_nodes, cand, [i], center_row=i)
            cols.append(_prune_column(n, patch.free_nodes, sols[0], prune))
            in_patch.append(cand)
    columns = sp.hstack(cols, format="csc")
    gram = compute_gram(columns, mesh)
    return BasisSet(
        form=form,
        kind=measurements.kind,
        layer=layer,
        columns=columns,
        gram=gram,
        in_patch=in_patch,
    )


def compute_gram(columns, mesh):
    """Dense L2 Gram matrix of basis columns."""
    M = assemble_mass(mesh)
    return np.asarray((columns.T @ (M @ columns)).todense())


def identity_basis(mesh):
    """Full fine-space basis paired with nodal measurements.

    Coarse operations with this basis reproduce fine-space operations
    exactly; used as the master oracle for projection code.
    """
    n = mesh.n_fine_nodes
    meas = nodal_measurements(mesh)
    columns = sp.identity(n, format="csc")
    basis = BasisSet(
        form="identity",
        kind="nodal",
        layer=None,
        columns=columns,
        gram=np.asarray(assemble_mass(mesh).todense()),
        in_patch=[np.arange(n)] * n,
    )
    return basis, meas


def max_constraint_violation(basis, measurements):
    """max_i max_{j in patch(i)} |<phi_j, psi_i> - delta_ij|."""
    pairings = np.asarray((measurements.matrix @ basis.columns).todense())
    worst = 0.0
    for i in range(basis.count):
        rows = basis.in_patch[i] if basis.in_patch is not None else np.arange(measurements.count)
        col = pairings[rows, i]
        expected = (rows == i).astype(float)
        worst = max(worst, float(np.abs(col - expected).max()))
    return worst


def decay_profile(mesh, kappa, form, measurements, i, layers, context=None):
    """Localization error ratios ||psi_i - psi_i^l|| / ||psi_i|| per norm.

    Returns one dict per layer with keys layer, l2, h1, energy, linf.  The
    global column solves the saturated problem; the energy column uses the
    form's own operator and is non-increasing in the layer.
    """
    from .coefficient import constant

    ctx = context or AssemblyContext(mesh, kappa)
    E = energy_matrix(mesh, kappa, form, context=ctx)
    M = assemble_mass(mesh, context=ctx)
    ctx1 = AssemblyContext(mesh, constant(1.0))
    H1 = (assemble_stiffness(mesh, constant(1.0), context=ctx1) + M).tocsr()

    free = np.arange(mesh.n_fine_nodes)
    cand = np.arange(measurements.count)
    sols, _ = _kkt_solve(E, measurements.matrix, free, cand, [i], center_row=i)
    psi = sols[0]

    def norms(v):
        return {
            "l2": np.sqrt(max(v @ (M @ v), 0.0)),
            "h1": np.sqrt(max(v @ (H1 @ v), 0.0)),
            "energy": np.sqrt(max(v @ (E @ v), 0.0)),
            "linf": np.abs(v).max(),
        }

    ref = norms(psi)
    out = []
    for layer in layers:
        col = solve_basis(mesh, kappa, form, measurements, i, layer, context=ctx)
        diff = psi - col.toarray().ravel()
        dn = norms(diff)
        out.append({"layer": layer, **{k: dn[k] / ref[k] for k in dn}})
    return out


# ---------------------------------------------------------------------------
# binary cache: magic, counts and tags, then per-column sparse payloads
# ---------------------------------------------------------------------------

_MAGIC = b"GRPSBAS1"


def save_basis(path, basis):
    """Write a basis set to the little-endian binary cache format."""
    cols = basis.columns.tocsc()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        layer = -1 if basis.layer is None else int(basis.layer)
        f.write(
            struct.pack(
                "<IBBiI",
                basis.count,
                _FORM_TAGS[basis.form],
                _KIND_TAGS[basis.kind],
                layer,
                basis.n_fine,
            )
        )
        for i in range(basis.count):
            lo, hi = cols.indptr[i], cols.indptr[i + 1]
            idx = cols.indices[lo:hi].astype("<i4")
            val = cols.data[lo:hi].astype("<f8")
            f.write(struct.pack("<I", idx.size))
            f.write(idx.tobytes())
            f.write(val.tobytes())


def load_basis(path):
    """Read a basis set from the binary cache; gram/patch data not stored."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a basis cache file: bad magic {magic!r}")
        count, form_tag, kind_tag, layer, n_fine = struct.unpack("<IBBiI", f.read(14))
        indptr = np.zeros(count + 1, dtype=np.int64)
        indices = []
        data = []
        for i in range(count):
            (nnz,) = struct.unpack("<I", f.read(4))
            indices.append(np.frombuffer(f.read(4 * nnz), dtype="<i4"))
            data.append(np.frombuffer(f.read(8 * nnz), dtype="<f8"))
            indptr[i + 1] = indptr[i] + nnz
    columns = sp.csc_matrix(
        (np.concatenate(data) if data else np.empty(0), np.concatenate(indices) if indices else np.empty(0, dtype=np.int32), indptr),
        shape=(n_fine, count),
    )
    return BasisSet(
        form=_FORM_NAMES[form_tag],
        kind=_KIND_NAMES[kind_tag],
        layer=None if layer < 0 else layer,
        columns=columns,
    )
