"""Hot numerical kernels with a numba fast path and a pure-numpy fallback.

Every kernel exists in two semantically identical versions: a numba
``@njit`` implementation and a vectorized numpy one.  The active backend is
chosen at import time from the ``LLGRPS_BACKEND`` environment variable
("numba" or "numpy"; default "numba" when numba imports cleanly) and can be
switched at runtime with :func:`set_backend`, which is what the benchmark
script does to compare both paths in one process.
"""

import os

import numpy as np

_ENV_VAR = "LLGRPS_BACKEND"

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

_backend = os.environ.get(_ENV_VAR, "numba" if _HAVE_NUMBA else "numpy").lower()
if _backend not in ("numba", "numpy"):
    raise ValueError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {_backend!r}")
if _backend == "numba" and not _HAVE_NUMBA:
    _backend = "numpy"


def backend():
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _backend


def set_backend(name):
    """Switch kernel backend at runtime; returns the previous backend name."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev = _backend
    _backend = name
    return prev


# ---------------------------------------------------------------------------
# quadrature-point field sums
#
# shape arrays: tri (n_t, 3) int32, nodal (n_nodes,), shp (3, n_q) P1 shape
# values at quadrature points, w (n_q,) weights, kq (n_t, n_q) coefficient
# samples.  All kernels return per-element quantities.
# ---------------------------------------------------------------------------


def _field_at_quad_py(tri, nodal, shp):
    return nodal[tri] @ shp


def _weighted_field_sum_py(tri, nodal, kq, w, shp):
    fq = nodal[tri] @ shp
    return (fq * kq) @ w


def _weighted_mass_blocks_py(tri, area, wq, kq, shp, weight_q):
    # out[e, i, j] = area_e * sum_q wq_q * kq_{e,q} * weight_q_{e,q} * N_i(q) N_j(q)
    s = wq * kq * weight_q
    out = np.einsum("eq,iq,jq->eij", s, shp, shp)
    return out * area[:, None, None]


if _HAVE_NUMBA:

    @njit(cache=True)
    def _weighted_field_sum_nb(tri, nodal, kq, w, shp):
        n_t = tri.shape[0]
        n_q = w.shape[0]
        out = np.zeros(n_t)
        for e in range(n_t):
            a = nodal[tri[e, 0]]
            b = nodal[tri[e, 1]]
            c = nodal[tri[e, 2]]
            acc = 0.0
            for q in range(n_q):
                fq = a * shp[0, q] + b * shp[1, q] + c * shp[2, q]
                acc += w[q] * kq[e, q] * fq
            out[e] = acc
        return out

    @njit(cache=True)
    def _weighted_mass_blocks_nb(tri, area, wq, kq, shp, weight_q):
        n_t = tri.shape[0]
        n_q = wq.shape[0]
        out = np.zeros((n_t, 3, 3))
        for e in range(n_t):
            for q in range(n_q):
                s = wq[q] * kq[e, q] * weight_q[e, q] * area[e]
                for i in range(3):
                    si = s * shp[i, q]
                    for j in range(3):
                        out[e, i, j] += si * shp[j, q]
        return out


def weighted_field_sum(tri, nodal, kq, w, shp):
    """Per-element sum_q w_q * k_{e,q} * f(x_q) for a P1 nodal field f."""
    if _backend == "numba":
        return _weighted_field_sum_nb(tri, nodal, kq, w, shp)
    return _weighted_field_sum_py(tri, nodal, kq, w, shp)


def weighted_mass_blocks(tri, area, wq, kq, shp, weight_q):
    """Per-element 3x3 blocks of int k(x) * weight(x) * N_i N_j dx."""
    if _backend == "numba":
        return _weighted_mass_blocks_nb(tri, area, wq, kq, shp, weight_q)
    return _weighted_mass_blocks_py(tri, area, wq, kq, shp, weight_q)


# ---------------------------------------------------------------------------
# triple-product tensor accumulation
#
# For each fine triangle a small set of coarse basis functions is "alive"
# (nonzero on its nodes).  alive_ptr/alive_idx is a CSR-like layout mapping
# triangle -> alive basis slots; alive_val holds the three nodal values of
# each alive basis on that triangle.
# ---------------------------------------------------------------------------


def _triple_mass_accumulate_py(alive_ptr, alive_idx, alive_val, area, wq, kq, shp, cube):
    n_t = alive_ptr.shape[0] - 1
    for e in range(n_t):
        lo, hi = alive_ptr[e], alive_ptr[e + 1]
        if hi == lo:
            continue
        idx = alive_idx[lo:hi]
        pv = alive_val[lo:hi] @ shp  # (n_alive, n_q)
        s = area[e] * wq * kq[e]
        contrib = np.einsum("q,kq,jq,iq->kji", s, pv, pv, pv)
        cube[np.ix_(idx, idx, idx)] += contrib


def _triple_gradmass_accumulate_py(
    alive_ptr, alive_idx, alive_val, alive_grad, area, wq, kq, shp, cube
):
    # cube[k, j, i] += int k(x) * psi_k * (grad psi_j . grad psi_i) over element
    n_t = alive_ptr.shape[0] - 1
    for e in range(n_t):
        lo, hi = alive_ptr[e], alive_ptr[e + 1]
        if hi == lo:
            continue
        idx = alive_idx[lo:hi]
        pv = alive_val[lo:hi] @ shp  # (n_alive, n_q)
        g = alive_grad[lo:hi]  # (n_alive, 2)
        gg = g @ g.T  # (n_alive, n_alive)
        wk = area[e] * (pv * (wq * kq[e])).sum(axis=1)  # int k psi_k weights
        contrib = np.einsum("k,ji->kji", wk, gg)
        cube[np.ix_(idx, idx, idx)] += contrib


def _triple_gradgrad_mass_accumulate_py(
    alive_ptr, alive_idx, alive_val, alive_grad, area, wq, shp, cube
):
    # cube[k, j, i] += int (grad psi_k . grad psi_j) * psi_i over element
    n_t = alive_ptr.shape[0] - 1
    for e in range(n_t):
        lo, hi = alive_ptr[e], alive_ptr[e + 1]
        if hi == lo:
            continue
        idx = alive_idx[lo:hi]
        pv = alive_val[lo:hi] @ shp
        g = alive_grad[lo:hi]
        gg = g @ g.T
        wi = area[e] * (pv * wq).sum(axis=1)  # int psi_i
        contrib = np.einsum("kj,i->kji", gg, wi)
        cube[np.ix_(idx, idx, idx)] += contrib


if _HAVE_NUMBA:

    @njit(cache=True)
    def _triple_mass_accumulate_nb(alive_ptr, alive_idx, alive_val, area, wq, kq, shp, cube):
        n_t = alive_ptr.shape[0] - 1
        n_q = wq.shape[0]
        for e in range(n_t):
            lo, hi = alive_ptr[e], alive_ptr[e + 1]
            na = hi - lo
            if na == 0:
                continue
            pv = np.empty((na, n_q))
            for a in range(na):
                v0 = alive_val[lo + a, 0]
                v1 = alive_val[lo + a, 1]
                v2 = alive_val[lo + a, 2]
                for q in range(n_q):
                    pv[a, q] = v0 * shp[0, q] + v1 * shp[1, q] + v2 * shp[2, q]
            sq = np.empty(n_q)
            for q in range(n_q):
                sq[q] = area[e] * wq[q] * kq[e, q]
            for a in range(na):
                ka = alive_idx[lo + a]
                for b in range(na):
                    jb = alive_idx[lo + b]
                    for c in range(na):
                        ic = alive_idx[lo + c]
                        acc = 0.0
                        for q in range(n_q):
                            acc += sq[q] * pv[a, q] * pv[b, q] * pv[c, q]
                        cube[ka, jb, ic] += acc

    @njit(cache=True)
    def _triple_gradmass_accumulate_nb(
        alive_ptr, alive_idx, alive_val, alive_grad, area, wq, kq, shp, cube
    ):
        n_t = alive_ptr.shape[0] - 1
        n_q = wq.shape[0]
        for e in range(n_t):
            lo, hi = alive_ptr[e], alive_ptr[e + 1]
            na = hi - lo
            if na == 0:
                continue
            wk = np.empty(na)
            for a in range(na):
                v0 = alive_val[lo + a, 0]
                v1 = alive_val[lo + a, 1]
                v2 = alive_val[lo + a, 2]
                acc = 0.0
                for q in range(n_q):
                    fq = v0 * shp[0, q] + v1 * shp[1, q] + v2 * shp[2, q]
                    acc += wq[q] * kq[e, q] * fq
                wk[a] = area[e] * acc
            for b in range(na):
                jb = alive_idx[lo + b]
                gbx = alive_grad[lo + b, 0]
                gby = alive_grad[lo + b, 1]
                for c in range(na):
                    ic = alive_idx[lo + c]
                    gg = gbx * alive_grad[lo + c, 0] + gby * alive_grad[lo + c, 1]
                    for a in range(na):
                        cube[alive_idx[lo + a], jb, ic] += wk[a] * gg

    @njit(cache=True)
    def _triple_gradgrad_mass_accumulate_nb(
        alive_ptr, alive_idx, alive_val, alive_grad, area, wq, shp, cube
    ):
        n_t = alive_ptr.shape[0] - 1
        n_q = wq.shape[0]
        for e in range(n_t):
            lo, hi = alive_ptr[e], alive_ptr[e + 1]
            na = hi - lo
            if na == 0:
                continue
            wi = np.empty(na)
            for a in range(na):
                v0 = alive_val[lo + a, 0]
                v1 = alive_val[lo + a, 1]
                v2 = alive_val[lo + a, 2]
                acc = 0.0
                for q in range(n_q):
                    acc += wq[q] * (v0 * shp[0, q] + v1 * shp[1, q] + v2 * shp[2, q])
                wi[a] = area[e] * acc
            for a in range(na):
                ka = alive_idx[lo + a]
                gax = alive_grad[lo + a, 0]
                gay = alive_grad[lo + a, 1]
                for b in range(na):
                    jb = alive_idx[lo + b]
                    gg = gax * alive_grad[lo + b, 0] + gay * alive_grad[lo + b, 1]
                    for c in range(na):
                        cube[ka, jb, alive_idx[lo + c]] += gg * wi[c]


def triple_mass_accumulate(alive_ptr, alive_idx, alive_val, area, wq, kq, shp, cube):
    """Accumulate (k psi_k psi_j, psi_i) element contributions into cube."""
    if _backend == "numba":
        _triple_mass_accumulate_nb(alive_ptr, alive_idx, alive_val, area, wq, kq, shp, cube)
    else:
        _triple_mass_accumulate_py(alive_ptr, alive_idx, alive_val, area, wq, kq, shp, cube)


def triple_gradmass_accumulate(alive_ptr, alive_idx, alive_val, alive_grad, area, wq, kq, shp, cube):
    """Accumulate (k psi_k grad psi_j, grad psi_i) contributions into cube."""
    if _backend == "numba":
        _triple_gradmass_accumulate_nb(
            alive_ptr, alive_idx, alive_val, alive_grad, area, wq, kq, shp, cube
        )
    else:
        _triple_gradmass_accumulate_py(
            alive_ptr, alive_idx, alive_val, alive_grad, area, wq, kq, shp, cube
        )


def triple_gradgrad_mass_accumulate(alive_ptr, alive_idx, alive_val, alive_grad, area, wq, shp, cube):
    """Accumulate (grad psi_k . grad psi_j, psi_i) contributions into cube."""
    if _backend == "numba":
        _triple_gradgrad_mass_accumulate_nb(
            alive_ptr, alive_idx, alive_val, alive_grad, area, wq, shp, cube
        )
    else:
        _triple_gradgrad_mass_accumulate_py(
            alive_ptr, alive_idx, alive_val, alive_grad, area, wq, shp, cube
        )


# ---------------------------------------------------------------------------
# sparse 3-tensor contractions (COO layout: kk, jj, ii index arrays + vals)
# ---------------------------------------------------------------------------


def _contract_weight_py(kk, jj, ii, vals, x, nj, ni):
    out = np.zeros(ni * nj)
    np.add.at(out, ii * nj + jj, vals * x[kk])
    return out.reshape(ni, nj)


def _contract_pair_py(kk, jj, ii, vals, a, b, ni):
    out = np.zeros(ni)
    np.add.at(out, ii, vals * a[kk] * b[jj])
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _contract_weight_nb(kk, jj, ii, vals, x, nj, ni):
        out = np.zeros((ni, nj))
        for t in range(vals.shape[0]):
            out[ii[t], jj[t]] += vals[t] * x[kk[t]]
        return out

    @njit(cache=True)
    def _contract_pair_nb(kk, jj, ii, vals, a, b, ni):
        out = np.zeros(ni)
        for t in range(vals.shape[0]):
            out[ii[t]] += vals[t] * a[kk[t]] * b[jj[t]]
        return out


def contract_weight(kk, jj, ii, vals, x, nj, ni):
    """Dense matrix M[i, j] = sum_k x_k T[k, j, i] from a COO 3-tensor."""
    if _backend == "numba":
        return _contract_weight_nb(kk, jj, ii, vals, x, nj, ni)
    return _contract_weight_py(kk, jj, ii, vals, x, nj, ni)


def contract_pair(kk, jj, ii, vals, a, b, ni):
    """Vector d[i] = sum_{k,j} a_k b_j T[k, j, i] from a COO 3-tensor."""
    if _backend == "numba":
        return _contract_pair_nb(kk, jj, ii, vals, a, b, ni)
    return _contract_pair_py(kk, jj, ii, vals, a, b, ni)
