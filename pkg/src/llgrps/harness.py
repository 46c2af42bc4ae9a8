"""Experiment driver: error metrics, convergence/decay/timing studies.

Studies write schema-stable CSV (fixed column order, header row, '.'
decimal) plus a run manifest echoing every resolved configuration value.
Desk-scale defaults shrink the full experimental setup to a reference
mesh of 64 divisions and coarse grids of 2, 4, 8; ``paper_scale=True``
restores the full size.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .assembly import AssemblyContext, assemble_mass, assemble_stiffness, as_vector_field
from .basis import build_measurements, decay_profile
from .coefficient import constant, parse_coefficient
from .mesh import build_hier_mesh
from .schemes import SchemeConfig
from .solver import (
    make_component_bases,
    precompute_tensors,
    run_algorithm1,
    run_algorithm2,
    run_reference,
)

__all__ = [
    "relative_error",
    "fit_rate",
    "StudyConfig",
    "RunReport",
    "convergence_study",
    "decay_study",
    "timing_report",
    "write_csv",
    "write_manifest",
    "default_initial_field",
]

log = logging.getLogger(__name__)

ERROR_COLUMNS = [
    "scheme", "measurement", "form", "tau_mode", "algorithm", "layers",
    "n_c", "tau", "err_h1", "err_l2", "err_linf", "wall_basis", "wall_steps",
    "deviation_final",
]
RATE_COLUMNS = ["scheme", "measurement", "form", "tau_mode", "algorithm", "layers", "rate_h1", "n_points"]
DECAY_COLUMNS = ["center", "layer", "norm", "ratio"]
TIMING_COLUMNS = ["label", "n_c", "seconds", "note"]


def default_initial_field(n_nodes):
    """Uniform unit initial magnetization used by all standard runs."""
    m0 = np.empty((3, n_nodes))
    m0[0] = 1.0 / np.sqrt(2.0)
    m0[1] = 1.0 / np.sqrt(3.0)
    m0[2] = 1.0 / np.sqrt(6.0)
    return m0


class _NormCache:
    """H1/L2 norm operators on a fine mesh, built once per study."""

    def __init__(self, mesh):
        self.K1 = assemble_stiffness(mesh, constant(1.0))
        self.M = assemble_mass(mesh)

    def h1(self, v):
        return math.sqrt(sum(float(v[c] @ (self.K1 @ v[c]) + v[c] @ (self.M @ v[c])) for c in range(3)))

    def l2(self, v):
        return math.sqrt(sum(float(v[c] @ (self.M @ v[c])) for c in range(3)))


def relative_error(mesh, fine, coarse, norm="H1", cache=None):
    """Relative difference of two fields on one fine mesh.

    The H1 norm is the unweighted seminorm plus the L2 part; Linf compares
    nodal values.  Raises on a zero-norm reference field.
    """
    fine = as_vector_field(fine, mesh)
    coarse = as_vector_field(coarse, mesh)
    diff = coarse - fine
    if norm == "Linf":
        denom = float(np.abs(fine).max())
        if denom == 0.0:
            raise ZeroDivisionError("reference field has zero Linf norm")
        return float(np.abs(diff).max()) / denom
    cache = cache or _NormCache(mesh)
    fn = cache.h1 if norm == "H1" else cache.l2 if norm == "L2" else None
    if fn is None:
        raise ValueError(f"unknown norm {norm!r}")
    denom = fn(fine)
    if denom == 0.0:
        raise ZeroDivisionError(f"reference field has zero {norm} norm")
    return fn(diff) / denom


def fit_rate(points):
    """Least-squares slope of log(error) against log(N_c).

    Negative slopes mean convergence.  Requires at least two points with
    positive errors.
    """
    pts = [(float(n), float(e)) for n, e in points]
    if len(pts) < 2:
        raise ValueError("rate fit needs at least two points")
    for n, e in pts:
        if e <= 0.0 or not math.isfinite(e):
            raise ValueError(f"rate fit requires positive finite errors, got {e}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    A = np.vstack([x, np.ones_like(x)]).T
    slope, _ = np.linalg.lstsq(A, y, rcond=None)[0]
    return float(slope)


@dataclass
class StudyConfig:
    """Configuration shared by the convergence, decay and timing studies."""

    fine_divisions: int = 64
    nc_list: tuple = (2, 4, 8)
    schemes: tuple = ("cimrak", "gao", "an")
    cells: tuple = (("volume", "H2"), ("volume", "H"), ("edge", "H"))
    form: str = "mixed"
    layers: int | None = None  # None = saturated/global basis
    algorithm: int = 1
    T: float = 1.0
    lam: float = 1.0
    coeff: str = "mstrig"
    solver_mode: str = "lagged"
    paper_scale: bool = False
    out_dir: str | None = None
    seed: int | None = None  # reserved; all runs are deterministic

    def __post_init__(self):
        if self.paper_scale:
            self.fine_divisions = 128
            self.nc_list = (2, 4, 8, 16)

    def resolved(self):
        d = asdict(self)
        d["reference_dt"] = self.reference_dt
        d["rate_fit"] = "least-squares over all sweep points"
        return d

    @property
    def reference_dt(self):
        h = 1.0 / self.fine_divisions
        return h * h


def _tau_value(tau_mode, n_c):
    if tau_mode == "H":
        return 1.0 / n_c
    if tau_mode == "H2":
        return 1.0 / n_c**2
    return float(tau_mode)


@dataclass
class RunReport:
    """Study output: per-point error rows, fitted rates, wall times."""

    config: dict
    errors: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def convergence_study(cfg, progress=None):
    """Sweep schemes x cells x coarse sizes against per-scheme references.

    The reference is solved once per scheme on the fine mesh with
    dt = h^2; every coarse run shares that fine mesh through the mesh
    hierarchy, so errors are plain nodal comparisons.
    """
    report = RunReport(config=cfg.resolved())
    kappa = parse_coefficient(cfg.coeff)
    fine = cfg.fine_divisions
    mesh_ref = build_hier_mesh(fine, 0)
    norms = _NormCache(mesh_ref)
    m0 = default_initial_field(mesh_ref.n_fine_nodes)

    refs = {}
    for scheme in cfg.schemes:
        t0 = time.perf_counter()
        refs[scheme] = run_reference(
            SchemeConfig(scheme, dt=cfg.reference_dt, lam=cfg.lam),
            mesh_ref, kappa, m0, cfg.T, solver_mode=cfg.solver_mode,
        )
        report.timings[f"reference_{scheme}"] = time.perf_counter() - t0
        if progress:
            progress(f"reference {scheme}: {report.timings[f'reference_{scheme}']:.1f}s")

    bases_cache = {}
    for scheme in cfg.schemes:
        for meas_kind, tau_mode in cfg.cells:
            errs = []
            for n_c in cfg.nc_list:
                J = int(round(math.log2(fine / n_c)))
                if n_c * 2**J != fine:
                    raise ValueError(f"coarse size {n_c} does not divide fine {fine} by powers of 2")
                key = (n_c, meas_kind)
                if key not in bases_cache:
                    t0 = time.perf_counter()
                    mesh = build_hier_mesh(n_c, J)
                    meas = build_measurements(mesh, meas_kind)
                    bases = make_component_bases(mesh, kappa, meas, form=cfg.form, layer=cfg.layers)
                    bases_cache[key] = (mesh, meas, bases, time.perf_counter() - t0)
                mesh, meas, bases, wall_basis = bases_cache[key]
                tau = _tau_value(tau_mode, n_c)
                run_cfg = SchemeConfig(scheme, dt=tau, lam=cfg.lam)
                runner = run_algorithm2 if cfg.algorithm == 2 else run_algorithm1
                run = runner(run_cfg, mesh, kappa, bases, m0, cfg.T)
                err_h1 = relative_error(mesh_ref, refs[scheme].final, run.final, "H1", cache=norms)
                row = {
                    "scheme": scheme, "measurement": meas_kind, "form": cfg.form,
                    "tau_mode": tau_mode, "algorithm": cfg.algorithm,
                    "layers": "saturated" if cfg.layers is None else cfg.layers,
                    "n_c": n_c, "tau": tau,
                    "err_h1": err_h1,
                    "err_l2": relative_error(mesh_ref, refs[scheme].final, run.final, "L2", cache=norms),
                    "err_linf": relative_error(mesh_ref, refs[scheme].final, run.final, "Linf"),
                    "wall_basis": wall_basis,
                    "wall_steps": run.step_time,
                    "deviation_final": run.diagnostics["deviation_final"],
                }
                errs.append((n_c, err_h1))
                report.errors.append(row)
                if progress:
                    progress(f"{scheme}/{meas_kind}/{tau_mode} N_c={n_c}: H1 {err_h1:.3e}")
            if len(errs) < 3:
                log.warning(
                    "rate for %s/%s/%s fitted over only %d points",
                    scheme, meas_kind, tau_mode, len(errs),
                )
            report.rates.append(
                {
                    "scheme": scheme, "measurement": meas_kind, "form": cfg.form,
                    "tau_mode": tau_mode, "algorithm": cfg.algorithm,
                    "layers": "saturated" if cfg.layers is None else cfg.layers,
                    "rate_h1": fit_rate(errs), "n_points": len(errs),
                }
            )
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_csv(os.path.join(cfg.out_dir, "errors.csv"), ERROR_COLUMNS, report.errors)
        write_csv(os.path.join(cfg.out_dir, "rates.csv"), RATE_COLUMNS, report.rates)
        write_manifest(os.path.join(cfg.out_dir, "run-manifest.txt"), report.config)
    return report


def decay_study(cfg, n_c=8, refine_j=3, measurement="volume", form="v1", centers=None,
                layers=(2, 3, 4, 5, 6)):
    """Localization-ratio rows for selected basis centers.

    Centers default to every interior measurement entity (no support node
    on the domain boundary).  Ratios are emitted for the l2, h1, energy
    and linf norms.
    """
    kappa = parse_coefficient(cfg.coeff)
    mesh = build_hier_mesh(n_c, refine_j)
    meas = build_measurements(mesh, measurement)
    ctx = AssemblyContext(mesh, kappa)
    if centers is None:
        centers = interior_centers(mesh, meas)
    rows = []
    for i in centers:
        for entry in decay_profile(mesh, kappa, form, meas, i, layers, context=ctx):
            for norm in ("l2", "h1", "energy", "linf"):
                rows.append({"center": i, "layer": entry["layer"], "norm": norm, "ratio": entry[norm]})
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_csv(os.path.join(cfg.out_dir, "decay.csv"), DECAY_COLUMNS, rows)
        manifest = cfg.resolved()
        manifest.update({"decay_n_c": n_c, "decay_refine_j": refine_j,
                         "decay_measurement": measurement, "decay_form": form,
                         "decay_layers": list(layers), "decay_centers": len(centers)})
        write_manifest(os.path.join(cfg.out_dir, "run-manifest.txt"), manifest)
    return rows


def interior_centers(mesh, measurements):
    """Measurement indices whose support touches no domain-boundary node."""
    out = []
    for i, nodes in enumerate(measurements.support_nodes):
        if not mesh.boundary_node[nodes].any():
            out.append(i)
    return out


def timing_report(cfg, n_steps_ct4=20, tensor_layer=2, reference_run=None, progress=None):
    """Wall-clock roles of the pipeline at the configured scale.

    CT0 reference solve (first scheme in the config), CT2 basis build,
    CT3 tensor assembly, CT4 accelerated coarse stepping per coarse size.
    CT1 (fine quadruple-product assembly) is extrapolated from a truncated
    element sweep and labeled an estimate.  Timings exclude the first
    repetition (warm-up) where repeats happen.
    """
    kappa = parse_coefficient(cfg.coeff)
    fine = cfg.fine_divisions
    scheme = cfg.schemes[0]
    rows = []

    if reference_run is None:
        mesh_ref = build_hier_mesh(fine, 0)
        m0 = default_initial_field(mesh_ref.n_fine_nodes)
        t0 = time.perf_counter()
        reference_run = run_reference(
            SchemeConfig(scheme, dt=cfg.reference_dt, lam=cfg.lam),
            mesh_ref, kappa, m0, cfg.T, solver_mode=cfg.solver_mode,
        )
        ct0 = time.perf_counter() - t0
    else:
        ct0 = reference_run.wall_time
    for n_c in cfg.nc_list:
        rows.append({"label": "CT0", "n_c": n_c, "seconds": ct0, "note": "reference solve"})

    # CT1: per-element cost of the quadruple-product fine assembly, truncated sweep
    mesh_ref = build_hier_mesh(fine, 0)
    n_t = mesh_ref.n_fine_triangles
    sample = min(n_t, 512)
    ctx = AssemblyContext(mesh_ref, kappa)
    rng = np.random.default_rng(0)
    nodal = rng.standard_normal(mesh_ref.n_fine_nodes)
    t0 = time.perf_counter()
    for e in range(sample):
        tri = ctx.tri[e]
        pv = nodal[tri] @ ctx.shp6
        # one (i, j, k, l) quadruple sweep per element at 6 quadrature points
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    for l in range(3):
                        float((ctx.w6 * pv * ctx.shp6[i] * ctx.shp6[j] * ctx.shp6[k] * ctx.shp6[l]).sum())
    ct1 = (time.perf_counter() - t0) / sample * n_t
    for n_c in cfg.nc_list:
        rows.append({"label": "CT1", "n_c": n_c, "seconds": ct1,
                     "note": "estimate: extrapolated from truncated fine sweep"})

    for n_c in cfg.nc_list:
        J = int(round(math.log2(fine / n_c)))
        mesh = build_hier_mesh(n_c, J)
        meas = build_measurements(mesh, "volume")
        t0 = time.perf_counter()
        bases = make_component_bases(mesh, kappa, meas, form=cfg.form, layer=tensor_layer)
        ct2 = time.perf_counter() - t0
        rows.append({"label": "CT2", "n_c": n_c, "seconds": ct2, "note": "basis generation"})
        t0 = time.perf_counter()
        tensors = precompute_tensors(mesh, kappa, bases)
        ct3 = time.perf_counter() - t0
        rows.append({"label": "CT3", "n_c": n_c, "seconds": ct3, "note": "triple-tensor assembly"})
        m0 = default_initial_field(mesh.n_fine_nodes)
        tau = 1.0 / n_c**2
        run_cfg = SchemeConfig("cimrak", dt=tau, lam=cfg.lam)
        T_run = n_steps_ct4 * tau
        run_algorithm1(run_cfg, mesh, kappa, bases, m0, T_run, accelerated=True, tensors=tensors)  # warm-up
        run = run_algorithm1(run_cfg, mesh, kappa, bases, m0, T_run, accelerated=True, tensors=tensors)
        ct4 = run.step_time
        rows.append({"label": "CT4", "n_c": n_c, "seconds": ct4,
                     "note": f"accelerated coarse stepping, {run.n_steps} steps"})
        if progress:
            progress(f"N_c={n_c}: CT2 {ct2:.2f}s CT3 {ct3:.2f}s CT4 {ct4:.4f}s")
    rows.sort(key=lambda r: (r["label"], r["n_c"]))
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_csv(os.path.join(cfg.out_dir, "timing.csv"), TIMING_COLUMNS, rows)
        write_manifest(os.path.join(cfg.out_dir, "run-manifest.txt"), cfg.resolved())
    return rows


def write_csv(path, columns, rows):
    """Write dict rows with a fixed column order and '.' decimals."""
    with open(path, "w", newline="") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row.get(c, "")) for c in columns) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)  # shortest round-trip form, always '.' decimal
    return str(v)


def write_manifest(path, config):
    """Echo the resolved configuration as key=value lines."""
    with open(path, "w") as f:
        for k in sorted(config):
            f.write(f"{k}={config[k]}\n")
