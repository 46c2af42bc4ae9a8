"""Fine-scale P1 finite element operators.

Scalar fields are 1D arrays over fine nodes; magnetization fields are
(3, n_fine_nodes) arrays (components m1, m2, m3).  Vectorial operators are
3x3 node-blocks in component-major ordering: global dof = c * n + node.

Quadrature: a 3-point interior rule (exact for quadratics) serves the
bilinear operators; the 6-point rule (exact for quartics) is required for
every pairing with three or more P1 factors and for unit-length /
energy diagnostics.  The coefficient is always sampled at quadrature
points, never averaged per element.
"""

import numpy as np
import scipy.sparse as sp

from . import _kernels

__all__ = [
    "AssemblyError",
    "AssemblyContext",
    "TRI_Q3",
    "TRI_Q6",
    "assemble_stiffness",
    "assemble_mass",
    "lumped_mass_diagonal",
    "assemble_anisotropy_mass",
    "assemble_cross_term",
    "assemble_weighted_mass",
    "discrete_effective_field",
    "ll_energy",
    "l2_deviation_from_unit",
    "as_vector_field",
]


class AssemblyError(RuntimeError):
    """Raised when assembly preconditions fail (e.g. coefficient out of bounds)."""


# barycentric points (rows) and weights; weights sum to 1 (scale by area)
TRI_Q3 = (
    np.array(
        [
            [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
        ]
    ),
    np.full(3, 1.0 / 3.0),
)

_A1, _B1, _W1 = 0.816847572980459, 0.091576213509771, 0.109951743655322
_A2, _B2, _W2 = 0.108103018168070, 0.445948490915965, 0.223381589678011
TRI_Q6 = (
    np.array(
        [
            [_A1, _B1, _B1],
            [_B1, _A1, _B1],
            [_B1, _B1, _A1],
            [_A2, _B2, _B2],
            [_B2, _A2, _B2],
            [_B2, _B2, _A2],
        ]
    ),
    np.array([_W1, _W1, _W1, _W2, _W2, _W2]),
)

_ELEM_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def as_vector_field(m, mesh=None):
    """Validate and return a (3, n) float array magnetization field."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != 3:
        raise ValueError(f"expected (3, n_nodes) field, got shape {m.shape}")
    if mesh is not None and m.shape[1] != mesh.n_fine_nodes:
        raise ValueError(f"field has {m.shape[1]} nodes, mesh has {mesh.n_fine_nodes}")
    if not np.isfinite(m).all():
        raise ValueError("field contains non-finite values")
    return m


class AssemblyContext:
    """Precomputed per-element geometry and coefficient samples.

    Shared by all operators over one (mesh, coefficient) pair; building it
    verifies the declared coefficient bounds at every quadrature point.
    """

    def __init__(self, mesh, kappa):
        self.mesh = mesh
        self.kappa = kappa
        tri = mesh.fine_triangles
        pts = mesh.fine_nodes[tri]  # (n_t, 3, 2)
        d1 = pts[:, 1] - pts[:, 0]
        d2 = pts[:, 2] - pts[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.area = 0.5 * np.abs(det)
        # P1 gradients: reference grads [[-1,-1],[1,0],[0,1]] times J^{-1}
        inv = np.empty((det.shape[0], 2, 2))
        inv[:, 0, 0] = d2[:, 1] / det
        inv[:, 0, 1] = -d2[:, 0] / det
        inv[:, 1, 0] = -d1[:, 1] / det
        inv[:, 1, 1] = d1[:, 0] / det
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        self.grads = np.einsum("ik,ekj->eij", ref, inv)  # (n_t, 3, 2)
        # geometric stiffness blocks: area * grad_i . grad_j
        self.gmat = np.einsum("eik,ejk->eij", self.grads, self.grads) * self.area[:, None, None]

        lam3, self.w3 = TRI_Q3
        lam6, self.w6 = TRI_Q6
        self.shp3 = np.ascontiguousarray(lam3.T)  # (3, 3): node value at each point
        self.shp6 = np.ascontiguousarray(lam6.T)  # (3, 6)
        q3 = np.einsum("qi,eik->eqk", lam3, pts)
        q6 = np.einsum("qi,eik->eqk", lam6, pts)
        self.kq3 = np.ascontiguousarray(kappa(q3))
        self.kq6 = np.ascontiguousarray(kappa(q6))
        for name, kq in (("3-point", self.kq3), ("6-point", self.kq6)):
            lo, hi = kq.min(), kq.max()
            if lo < kappa.kappa_min or hi > kappa.kappa_max:
                raise AssemblyError(
                    f"coefficient sample out of declared bounds at {name} rule: "
                    f"[{lo:.6g}, {hi:.6g}] vs [{kappa.kappa_min:.6g}, {kappa.kappa_max:.6g}]"
                )
        self.tri = np.ascontiguousarray(tri, dtype=np.int32)
        self.n = mesh.n_fine_nodes
        # mean coefficient per element under each rule
        self.kbar3 = self.kq3 @ self.w3
        self.kbar6 = self.kq6 @ self.w6

    # -- scatter helpers ---------------------------------------------------

    def scatter(self, blocks):
        """Assemble per-element (n_t, 3, 3) blocks into a scalar CSR matrix."""
        tri = self.tri
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(self.n, self.n))
        return mat.tocsr()

    def field_at_q(self, nodal, rule=6):
        """P1 field values at quadrature points, (n_t, n_q)."""
        shp = self.shp6 if rule == 6 else self.shp3
        return nodal[self.tri] @ shp


def assemble_stiffness(mesh, kappa, context=None):
    """Coefficient-weighted stiffness matrix (kappa grad u, grad v)."""
    ctx = context or AssemblyContext(mesh, kappa)
    return ctx.scatter(ctx.gmat * ctx.kbar3[:, None, None])


def assemble_mass(mesh, lumped=False, context=None):
    """Mass matrix; ``lumped=True`` gives the row-sum diagonal variant."""
    if context is None:
        pts = mesh.fine_nodes[mesh.fine_triangles]
        d1 = pts[:, 1] - pts[:, 0]
        d2 = pts[:, 2] - pts[:, 0]
        area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        tri = mesh.fine_triangles
    else:
        area = context.area
        tri = context.tri
    if lumped:
        diag = np.zeros(mesh.n_fine_nodes)
        np.add.at(diag, tri.ravel(), np.repeat(area / 3.0, 3))
        return sp.diags(diag).tocsr()
    blocks = _ELEM_MASS[None, :, :] * area[:, None, None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(mesh.n_fine_nodes,) * 2).tocsr()


def lumped_mass_diagonal(mesh):
    """Row-sum lumped mass diagonal as a plain vector."""
    return np.asarray(assemble_mass(mesh, lumped=True).diagonal())


def assemble_anisotropy_mass(mesh, context=None):
    """Block-diagonal easy-axis operator: zero block, mass, mass."""
    M = assemble_mass(mesh, context=context)
    Z = sp.csr_matrix(M.shape)
    return sp.block_diag([Z, M, M], format="csr")


def assemble_weighted_mass(mesh, weight, context=None, with_kappa=False):
    """Scalar weighted mass (w phi_j, phi_i) with P1 weight w, 6-point rule.

    ``with_kappa=True`` multiplies the context's coefficient in at the
    quadrature points, giving (kappa w phi_j, phi_i).
    """
    if context is None:
        from .coefficient import constant

        context = AssemblyContext(mesh, constant(1.0))
    kq = context.kq6 if with_kappa else np.ones_like(context.kq6)
    wq = context.field_at_q(np.asarray(weight, dtype=np.float64), rule=6)
    blocks = _kernels.weighted_mass_blocks(context.tri, context.area, context.w6, kq, context.shp6, wq)
    return context.scatter(blocks)


def _cross_block_scalars(ctx, m_prev):
    """Per-element sums s_a = sum_q w_q kappa_q m_a(x_q) under the 3-point rule."""
    return np.stack(
        [
            _kernels.weighted_field_sum(ctx.tri, np.ascontiguousarray(m_prev[a]), ctx.kq3, ctx.w3, ctx.shp3)
            for a in range(3)
        ]
    )


def assemble_cross_term(mesh, kappa, m_prev, context=None):
    """Skew coupling -(m_prev x kappa grad w, grad v) as a 3x3-block operator.

    The quadratic form of the result vanishes identically; the previous
    magnetization enters at quadrature points via P1 interpolation.
    """
    ctx = context or AssemblyContext(mesh, kappa)
    m_prev = as_vector_field(m_prev, mesh)
    s = _cross_block_scalars(ctx, m_prev)
    n = ctx.n
    Z = sp.csr_matrix((n, n))

    def g_scaled(a, sign):
        return ctx.scatter(sign * s[a][:, None, None] * ctx.gmat)

    # block (c, b) = -sum_a eps_{c a b} s_a * gmat
    blocks = [
        [Z, g_scaled(2, +1.0), g_scaled(1, -1.0)],
        [g_scaled(2, -1.0), Z, g_scaled(0, +1.0)],
        [g_scaled(1, +1.0), g_scaled(0, -1.0), Z],
    ]
    return sp.bmat(blocks, format="csr")


def discrete_effective_field(mesh, kappa, m, context=None, anisotropy=True):
    """Nodal effective field via lumped-mass inversion of the weak form.

    Solves M_lump h_c = -K m_c - (A m)_c per component with natural
    boundary rows; the anisotropy block acts on components 2 and 3 only.
    """
    ctx = context or AssemblyContext(mesh, kappa)
    m = as_vector_field(m, mesh)
    K = assemble_stiffness(mesh, kappa, context=ctx)
    M = assemble_mass(mesh, context=ctx)
    lump = np.asarray(assemble_mass(mesh, lumped=True, context=ctx).diagonal())
    h = np.empty_like(m)
    for c in range(3):
        rhs = -(K @ m[c])
        if anisotropy and c >= 1:
            rhs -= M @ m[c]
        h[c] = rhs / lump
    return h


def ll_energy(mesh, kappa, m, context=None):
    """Exchange-plus-anisotropy energy 1/2 int kappa |grad m|^2 + m2^2 + m3^2."""
    ctx = context or AssemblyContext(mesh, kappa)
    m = as_vector_field(m, mesh)
    grad_sq = np.zeros(ctx.area.shape[0])
    for c in range(3):
        gc = np.einsum("ei,eik->ek", m[c][ctx.tri], ctx.grads)
        grad_sq += (gc**2).sum(axis=1)
    exch = float(np.sum(ctx.area * ctx.kbar6 * grad_sq))
    aniso = 0.0
    for c in (1, 2):
        fq = ctx.field_at_q(m[c], rule=6)
        aniso += float(np.sum(ctx.area * ((fq**2) @ ctx.w6)))
    return 0.5 * (exch + aniso)


def l2_deviation_from_unit(mesh, m, context=None):
    """|| 1 - |m|^2 ||_L2 of the P1-interpolated field, 6-point rule."""
    if context is None:
        from .coefficient import constant

        context = AssemblyContext(mesh, constant(1.0))
    m = as_vector_field(m, mesh)
    dev = np.ones((context.area.shape[0], context.w6.shape[0]))
    for c in range(3):
        fq = context.field_at_q(m[c], rule=6)
        dev -= fq**2
    val = float(np.sum(context.area * ((dev**2) @ context.w6)))
    return np.sqrt(max(val, 0.0))
