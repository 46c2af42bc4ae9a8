import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llgrps.coefficient import constant
from llgrps.harness import (
    ERROR_COLUMNS,
    RATE_COLUMNS,
    TIMING_COLUMNS,
    StudyConfig,
    convergence_study,
    decay_study,
    default_initial_field,
    fit_rate,
    interior_centers,
    relative_error,
    timing_report,
    write_csv,
    write_manifest,
)
from llgrps.basis import build_measurements
from llgrps.mesh import build_hier_mesh

from oracles import dense_mass, dense_stiffness


def test_relative_error_identical_fields():
    mesh = build_hier_mesh(2, 1)
    m = default_initial_field(mesh.n_fine_nodes)
    for norm in ("H1", "L2", "Linf"):
        assert relative_error(mesh, m, m, norm) == 0.0


def test_relative_error_homogeneity():
    mesh = build_hier_mesh(2, 1)
    m = default_initial_field(mesh.n_fine_nodes)
    for norm in ("H1", "L2", "Linf"):
        assert relative_error(mesh, m, 2.0 * m, norm) == pytest.approx(1.0, rel=1e-12)


def test_relative_error_hand_value_single_node():
    mesh = build_hier_mesh(1, 0)
    n = mesh.n_fine_nodes
    fine = default_initial_field(n)
    coarse = fine.copy()
    coarse[0, 2] += 0.25  # bump one nodal value of the first component
    K = dense_stiffness(mesh, constant(1.0))
    M = dense_mass(mesh)
    e = np.zeros(n)
    e[2] = 0.25
    num = math.sqrt(e @ (K + M) @ e)
    den = math.sqrt(sum(fine[c] @ (K + M) @ fine[c] for c in range(3)))
    assert relative_error(mesh, fine, coarse, "H1") == pytest.approx(num / den, rel=1e-12)


def test_relative_error_zero_reference_raises():
    mesh = build_hier_mesh(1, 0)
    z = np.zeros((3, mesh.n_fine_nodes))
    with pytest.raises(ZeroDivisionError):
        relative_error(mesh, z, z + 1.0, "H1")
    with pytest.raises(ValueError):
        relative_error(mesh, z + 1.0, z, "L1")


def test_fit_rate_exact_slopes():
    pts = [(2, 1.0 / 2), (4, 1.0 / 4), (8, 1.0 / 8)]
    assert fit_rate(pts) == pytest.approx(-1.0, abs=1e-12)
    pts = [(n, n**-0.5) for n in (2, 4, 8)]
    assert fit_rate(pts) == pytest.approx(-0.5, abs=1e-12)
    pts = [(n, 3.7 * n**-0.9940) for n in (2, 4, 8, 16)]
    assert fit_rate(pts) == pytest.approx(-0.9940, abs=1e-12)


@given(st.floats(-2.5, -0.1), st.floats(0.1, 10.0))
@settings(max_examples=50, deadline=None)
def test_fit_rate_recovers_power_laws(slope, scale):
    pts = [(n, scale * n**slope) for n in (2, 4, 8, 16)]
    assert fit_rate(pts) == pytest.approx(slope, rel=1e-9, abs=1e-9)


def test_fit_rate_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_rate([(2, 1.0)])
    with pytest.raises(ValueError):
        fit_rate([(2, 1.0), (4, 0.0)])
    with pytest.raises(ValueError):
        fit_rate([(2, 1.0), (4, -0.5)])


def test_empty_sweep_gives_empty_report(tmp_path):
    cfg = StudyConfig(fine_divisions=8, nc_list=(2,), schemes=(), cells=(),
                      T=0.125, out_dir=str(tmp_path))
    report = convergence_study(cfg)
    assert report.errors == []
    assert report.rates == []
    assert (tmp_path / "errors.csv").exists()
    assert (tmp_path / "run-manifest.txt").exists()


def test_toy_convergence_study(tmp_path):
    cfg = StudyConfig(
        fine_divisions=8, nc_list=(2, 4), schemes=("gao",),
        cells=(("volume", "H2"),), T=0.25, out_dir=str(tmp_path),
        solver_mode="direct",
    )
    report = convergence_study(cfg)
    assert len(report.errors) == 2
    assert len(report.rates) == 1
    assert set(report.timings) == {"reference_gao"}
    for row in report.errors:
        assert row["err_h1"] > 0
    header = (tmp_path / "errors.csv").read_text().splitlines()[0]
    assert header == ",".join(ERROR_COLUMNS)
    header = (tmp_path / "rates.csv").read_text().splitlines()[0]
    assert header == ",".join(RATE_COLUMNS)
    manifest = (tmp_path / "run-manifest.txt").read_text()
    assert "rate_fit=least-squares over all sweep points" in manifest
    assert "fine_divisions=8" in manifest


def test_nonmatching_coarse_size_raises(tmp_path):
    cfg = StudyConfig(fine_divisions=8, nc_list=(3,), schemes=("gao",),
                      cells=(("volume", "H"),), T=0.125, out_dir=str(tmp_path))
    with pytest.raises(ValueError):
        convergence_study(cfg)


def test_decay_study_rows(tmp_path):
    cfg = StudyConfig(out_dir=str(tmp_path))
    rows = decay_study(cfg, n_c=4, refine_j=2, measurement="volume", form="v1",
                       centers=None, layers=(2, 3, 6))
    mesh = build_hier_mesh(4, 2)
    meas = build_measurements(mesh, "volume")
    centers = interior_centers(mesh, meas)
    assert len(rows) == len(centers) * 3 * 4  # layers x norms
    norms = {r["norm"] for r in rows}
    assert norms == {"l2", "h1", "energy", "linf"}
    # saturated layer rows sit at solver-zero
    for r in rows:
        if r["layer"] == 6 and r["norm"] == "energy":
            assert r["ratio"] <= 1e-9
    # energy ratios non-increasing per center
    for c in centers:
        vals = [r["ratio"] for r in rows if r["center"] == c and r["norm"] == "energy"]
        for a, b in zip(vals, vals[1:]):
            assert b <= a + 1e-9
    assert (tmp_path / "decay.csv").read_text().splitlines()[0] == "center,layer,norm,ratio"


def test_interior_centers_counts():
    mesh = build_hier_mesh(8, 1)
    meas = build_measurements(mesh, "volume")
    centers = interior_centers(mesh, meas)
    assert len(centers) == 2 * 6 * 6
    for c in centers:
        assert not mesh.boundary_node[meas.support_nodes[c]].any()


def test_timing_report_labels(tmp_path):
    cfg = StudyConfig(fine_divisions=8, nc_list=(2,), schemes=("gao",),
                      T=0.125, out_dir=str(tmp_path), solver_mode="direct")
    rows = timing_report(cfg, n_steps_ct4=2, tensor_layer=2)
    labels = sorted({r["label"] for r in rows})
    assert labels == ["CT0", "CT1", "CT2", "CT3", "CT4"]
    ct1 = [r for r in rows if r["label"] == "CT1"]
    assert all("estimate" in r["note"] for r in ct1)
    header = (tmp_path / "timing.csv").read_text().splitlines()[0]
    assert header == ",".join(TIMING_COLUMNS)


def test_csv_locale_independent_floats(tmp_path):
    path = tmp_path / "x.csv"
    write_csv(path, ["a", "b"], [{"a": 0.1, "b": "t"}, {"a": 2.0, "b": "u"}])
    text = path.read_text()
    assert "0.1" in text and "," in text and ";" not in text


def test_manifest_roundtrip(tmp_path):
    path = tmp_path / "m.txt"
    write_manifest(path, {"b": 2, "a": "x"})
    assert path.read_text() == "a=x\nb=2\n"


def test_paper_scale_flag():
    cfg = StudyConfig(paper_scale=True)
    assert cfg.fine_divisions == 128
    assert cfg.nc_list == (2, 4, 8, 16)
    assert cfg.reference_dt == (1.0 / 128) ** 2
