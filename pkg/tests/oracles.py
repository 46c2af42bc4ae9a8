"""Independent dense reference implementations used as test oracles.

Everything here recomputes quantities from first principles with plain
loops and dense arrays: element integrals via explicit barycentric
quadrature, saddle problems via dense block solves, Galerkin projection
via dense congruence.  Nothing is shared with the package's sparse
assembly paths except the published quadrature rules, which are part of
the numerical contract being checked.
"""

import numpy as np

from llgrps.assembly import TRI_Q3, TRI_Q6

EPS = np.zeros((3, 3, 3))
for a, b, c in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
    EPS[a, b, c] = 1.0
    EPS[a, c, b] = -1.0


def tri_geometry(mesh, e):
    pts = mesh.fine_nodes[mesh.fine_triangles[e]]
    d1 = pts[1] - pts[0]
    d2 = pts[2] - pts[0]
    det = d1[0] * d2[1] - d1[1] * d2[0]
    area = 0.5 * abs(det)
    grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]) @ np.linalg.inv(
        np.array([[d1[0], d2[0]], [d1[1], d2[1]]])
    )
    return pts, area, grads


def quad_points(pts, rule):
    lam, w = rule
    return lam @ pts, w


def dense_mass(mesh):
    n = mesh.n_fine_nodes
    M = np.zeros((n, n))
    ref = (np.full((3, 3), 1.0) + np.eye(3)) / 12.0
    for e in range(mesh.n_fine_triangles):
        _, area, _ = tri_geometry(mesh, e)
        tri = mesh.fine_triangles[e]
        for i in range(3):
            for j in range(3):
                M[tri[i], tri[j]] += area * ref[i, j]
    return M


def dense_lumped(mesh):
    return dense_mass(mesh).sum(axis=1)


def dense_stiffness(mesh, kappa):
    n = mesh.n_fine_nodes
    K = np.zeros((n, n))
    for e in range(mesh.n_fine_triangles):
        pts, area, grads = tri_geometry(mesh, e)
        xq, w = quad_points(pts, TRI_Q3)
        kbar = float(np.dot(w, kappa(xq)))
        tri = mesh.fine_triangles[e]
        for i in range(3):
            for j in range(3):
                K[tri[i], tri[j]] += area * kbar * float(grads[i] @ grads[j])
    return K


def dense_weighted_mass(mesh, weight, kappa=None):
    """(w phi_j, phi_i) with P1 weight, 6-point rule, optional coefficient."""
    n = mesh.n_fine_nodes
    lam, wq = TRI_Q6
    W = np.zeros((n, n))
    for e in range(mesh.n_fine_triangles):
        pts, area, _ = tri_geometry(mesh, e)
        xq = lam @ pts
        kq = kappa(xq) if kappa is not None else np.ones(len(wq))
        tri = mesh.fine_triangles[e]
        wvals = lam @ weight[tri]
        for i in range(3):
            for j in range(3):
                W[tri[i], tri[j]] += area * float(np.sum(wq * kq * wvals * lam[:, i] * lam[:, j]))
    return W


def dense_cross(mesh, kappa, m_prev):
    """-(m_prev x kappa grad w, grad v) from the epsilon-tensor expansion."""
    n = mesh.n_fine_nodes
    lam, w3 = TRI_Q3
    C = np.zeros((3 * n, 3 * n))
    for e in range(mesh.n_fine_triangles):
        pts, area, grads = tri_geometry(mesh, e)
        xq = lam @ pts
        kq = kappa(xq)
        tri = mesh.fine_triangles[e]
        mq = lam @ m_prev[:, tri].T  # (nq, 3) components at quad points
        s = (w3[:, None] * kq[:, None] * mq).sum(axis=0)  # per component a
        gg = grads @ grads.T
        for cc in range(3):
            for bb in range(3):
                coef = -sum(EPS[cc, aa, bb] * s[aa] for aa in range(3))
                if coef == 0.0:
                    continue
                for i in range(3):
                    for j in range(3):
                        C[cc * n + tri[i], bb * n + tri[j]] += coef * area * gg[j, i]
    return C


def dense_anisotropy(mesh):
    n = mesh.n_fine_nodes
    M = dense_mass(mesh)
    A = np.zeros((3 * n, 3 * n))
    A[n : 2 * n, n : 2 * n] = M
    A[2 * n :, 2 * n :] = M
    return A


def dense_effective_field(mesh, kappa, m):
    K = dense_stiffness(mesh, kappa)
    M = dense_mass(mesh)
    lump = M.sum(axis=1)
    h = np.empty_like(m)
    for c in range(3):
        rhs = -(K @ m[c])
        if c >= 1:
            rhs -= M @ m[c]
        h[c] = rhs / lump
    return h


def dense_coupling(mesh, m_prev):
    """-(m_prev x m_a^{new}, v): trial components 2, 3 only, 6-point rule."""
    n = mesh.n_fine_nodes
    C = np.zeros((3 * n, 3 * n))
    for bb in (1, 2):
        for cc in range(3):
            coef_field = np.zeros(n)
            hit = False
            for aa in range(3):
                if EPS[cc, aa, bb] != 0.0:
                    coef_field = coef_field - EPS[cc, aa, bb] * m_prev[aa]
                    hit = True
            if hit:
                W = dense_weighted_mass(mesh, coef_field)
                C[cc * n : (cc + 1) * n, bb * n : (bb + 1) * n] += W
    return C


def dense_scheme_system(scheme, mesh, kappa, m_prev, dt, lam=1.0):
    """Full dense (matrix, rhs) for one step of a named scheme."""
    n = mesh.n_fine_nodes
    M = dense_mass(mesh)
    K = dense_stiffness(mesh, kappa)
    A = np.zeros((3 * n, 3 * n))
    for c in range(3):
        A[c * n : (c + 1) * n, c * n : (c + 1) * n] += M / dt + lam * K
    A += lam * dense_anisotropy(mesh)
    A += dense_cross(mesh, kappa, m_prev)
    A += dense_coupling(mesh, m_prev)
    rhs = np.concatenate([M @ m_prev[c] / dt for c in range(3)])

    if scheme in ("cimrak", "gao"):
        h = dense_effective_field(mesh, kappa, m_prev)
        s = (m_prev * h).sum(axis=0)
        if scheme == "cimrak":
            W = dense_weighted_mass(mesh, s)
            for c in range(3):
                A[c * n : (c + 1) * n, c * n : (c + 1) * n] += lam * W
        else:
            lamQ6, w6 = TRI_Q6
            load = np.zeros((3, n))
            for e in range(mesh.n_fine_triangles):
                pts, area, _ = tri_geometry(mesh, e)
                tri = mesh.fine_triangles[e]
                sq = lamQ6 @ s[tri]
                for c in range(3):
                    mq = lamQ6 @ m_prev[c][tri]
                    for i in range(3):
                        load[c, tri[i]] += area * float(np.sum(w6 * sq * mq * lamQ6[:, i]))
            rhs -= lam * load.ravel()
    elif scheme == "an":
        lamQ6, w6 = TRI_Q6
        for e in range(mesh.n_fine_triangles):
            pts, area, grads = tri_geometry(mesh, e)
            xq = lamQ6 @ pts
            kq = kappa(xq)
            tri = mesh.fine_triangles[e]
            grad_m = [m_prev[b][tri] @ grads for b in range(3)]  # (2,) per component
            for cc in range(3):
                mcq = lamQ6 @ m_prev[cc][tri]
                for bb in range(3):
                    for i in range(3):
                        for j in range(3):
                            val = area * float(
                                np.sum(w6 * kq * mcq * lamQ6[:, i]) * (grads[j] @ grad_m[bb])
                            )
                            if bb >= 1:
                                maq = lamQ6 @ m_prev[bb][tri]
                                val += lam * area * float(
                                    np.sum(w6 * maq * mcq * lamQ6[:, i] * lamQ6[:, j])
                                )
                            A[cc * n + tri[i], bb * n + tri[j]] += lam * val
    else:
        raise ValueError(scheme)
    return A, rhs


def dense_kkt_basis(E, Phi, i):
    """Global basis column from the dense saddle problem."""
    n = E.shape[0]
    m = Phi.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = E
    kkt[:n, n:] = Phi.T
    kkt[n:, :n] = Phi
    rhs = np.zeros(n + m)
    rhs[n + i] = 1.0
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n]


def brute_force_patch(mesh, seed_elems, layer):
    """Vertex-adjacency growth by exhaustive scan over coarse triangles."""
    elems = set(int(t) for t in seed_elems)
    tris = mesh.coarse_triangles
    for _ in range(layer):
        verts = set(tris[sorted(elems)].ravel().tolist())
        grown = set(elems)
        for t in range(tris.shape[0]):
            if verts & set(tris[t].tolist()):
                grown.add(t)
        elems = grown
    return np.array(sorted(elems))


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle x,y>=0, x+y<=1."""
    import math

    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
