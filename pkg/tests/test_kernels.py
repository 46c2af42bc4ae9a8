"""The numba kernels and their numpy fallbacks must agree bit-for-bit in
semantics; the backend is switchable at runtime for the comparison."""

import numpy as np
import pytest

from llgrps import _kernels
from llgrps.assembly import AssemblyContext, assemble_cross_term, assemble_weighted_mass
from llgrps.basis import build_measurements
from llgrps.coefficient import mstrig_field
from llgrps.mesh import build_hier_mesh
from llgrps.solver import make_component_bases, precompute_tensors


@pytest.fixture
def both_backends():
    if not _kernels._HAVE_NUMBA:
        pytest.skip("numba unavailable; only one backend to compare")
    yield
    _kernels.set_backend("numba")


def test_backend_switch_roundtrip(both_backends):
    prev = _kernels.set_backend("numpy")
    assert _kernels.backend() == "numpy"
    _kernels.set_backend(prev)
    assert _kernels.backend() == prev
    with pytest.raises(ValueError):
        _kernels.set_backend("fortran")


def test_weighted_sums_agree(both_backends):
    mesh = build_hier_mesh(4, 1)
    kappa = mstrig_field()
    ctx = AssemblyContext(mesh, kappa)
    rng = np.random.default_rng(0)
    nodal = rng.standard_normal(mesh.n_fine_nodes)
    _kernels.set_backend("numba")
    a = _kernels.weighted_field_sum(ctx.tri, nodal, ctx.kq3, ctx.w3, ctx.shp3)
    _kernels.set_backend("numpy")
    b = _kernels.weighted_field_sum(ctx.tri, nodal, ctx.kq3, ctx.w3, ctx.shp3)
    assert np.allclose(a, b, rtol=1e-14, atol=1e-17)


def test_weighted_mass_blocks_agree(both_backends):
    mesh = build_hier_mesh(4, 1)
    kappa = mstrig_field()
    ctx = AssemblyContext(mesh, kappa)
    rng = np.random.default_rng(1)
    w = rng.standard_normal(mesh.n_fine_nodes)
    _kernels.set_backend("numba")
    a = assemble_weighted_mass(mesh, w, context=ctx, with_kappa=True).toarray()
    _kernels.set_backend("numpy")
    b = assemble_weighted_mass(mesh, w, context=ctx, with_kappa=True).toarray()
    assert np.abs(a - b).max() < 1e-14


def test_cross_term_backend_agreement(both_backends):
    mesh = build_hier_mesh(2, 2)
    kappa = mstrig_field()
    rng = np.random.default_rng(2)
    m = rng.standard_normal((3, mesh.n_fine_nodes))
    _kernels.set_backend("numba")
    a = assemble_cross_term(mesh, kappa, m).toarray()
    _kernels.set_backend("numpy")
    b = assemble_cross_term(mesh, kappa, m).toarray()
    assert np.abs(a - b).max() < 1e-13


def test_tensor_accumulation_backend_agreement(both_backends):
    mesh = build_hier_mesh(2, 1)
    kappa = mstrig_field()
    meas = build_measurements(mesh, "volume")
    bases = make_component_bases(mesh, kappa, meas, form="mixed")
    _kernels.set_backend("numba")
    ta = precompute_tensors(mesh, kappa, bases)
    _kernels.set_backend("numpy")
    tb = precompute_tensors(mesh, kappa, bases)
    assert ta.blocks.keys() == tb.blocks.keys()
    for key in ta.blocks:
        a, b = ta.blocks[key], tb.blocks[key]
        assert a.nnz == b.nnz
        scale = max(1.0, np.abs(a.vals).max())
        assert np.abs(a.vals - b.vals).max() < 1e-12 * scale


def test_contractions_agree(both_backends):
    rng = np.random.default_rng(3)
    nk = nj = ni = 7
    nnz = 60
    kk = rng.integers(0, nk, nnz).astype(np.int32)
    jj = rng.integers(0, nj, nnz).astype(np.int32)
    ii = rng.integers(0, ni, nnz).astype(np.int32)
    vals = rng.standard_normal(nnz)
    x = rng.standard_normal(nk)
    y = rng.standard_normal(nj)
    _kernels.set_backend("numba")
    ma = _kernels.contract_weight(kk, jj, ii, vals, x, nj, ni)
    da = _kernels.contract_pair(kk, jj, ii, vals, x, y, ni)
    _kernels.set_backend("numpy")
    mb = _kernels.contract_weight(kk, jj, ii, vals, x, nj, ni)
    db = _kernels.contract_pair(kk, jj, ii, vals, x, y, ni)
    assert np.abs(ma - mb).max() < 1e-13
    assert np.abs(da - db).max() < 1e-13
    # dense reference
    dense = np.zeros((nk, nj, ni))
    np.add.at(dense, (kk, jj, ii), vals)
    assert np.abs(np.einsum("kji,k->ij", dense, x) - mb).max() < 1e-12
    assert np.abs(np.einsum("kji,k,j->i", dense, x, y) - db).max() < 1e-12


def test_env_var_selects_backend():
    import subprocess
    import sys

    code = "import llgrps._kernels as k; print(k.backend())"
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={"PATH": "/usr/bin:/bin", "LLGRPS_BACKEND": "numpy"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
