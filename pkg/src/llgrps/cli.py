"""Command-line driver.

Subcommands: mesh-info, basis, solve-fine, solve-ms, convergence, timing.
A plain-text key=value configuration file can seed any flag; explicit
command-line flags override file values.  All outputs are CSV files plus
a run-manifest echoing the resolved configuration.
"""

import argparse
import logging
import os
import sys

from .basis import build_basis_set, build_measurements, max_constraint_violation, save_basis
from .coefficient import parse_coefficient
from .harness import (
    DECAY_COLUMNS,
    StudyConfig,
    convergence_study,
    default_initial_field,
    timing_report,
    write_csv,
    write_manifest,
)
from .mesh import build_hier_mesh
from .schemes import SchemeConfig
from .solver import (
    make_component_bases,
    precompute_tensors,
    run_algorithm1,
    run_algorithm2,
    run_reference,
    save_tensors,
    tensor_cache_key,
    write_snapshot_csv,
)

log = logging.getLogger(__name__)


def load_config_file(path):
    """Parse a key=value configuration file; '#' starts a comment line."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _tau_value(tau, n_c):
    if tau == "H":
        return 1.0 / n_c
    if tau == "H2":
        return 1.0 / n_c**2
    return float(tau)


def _parse_layers(value):
    if value is None or value in ("saturated", "none", ""):
        return None
    return int(value)


def build_parser():
    p = argparse.ArgumentParser(prog="llgrps", description=__doc__)
    p.add_argument("--config", help="key=value configuration file; flags override")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, scheme=False, measurement=False, form=False, layers=False,
               tau=False, run=False):
        sp.add_argument("--nc", default=None, help="coarse divisions (convergence: comma list)")
        sp.add_argument("--refine-J", dest="refine_J", type=int, default=None)
        sp.add_argument("--coeff", default=None, help='"mstrig" or "constant:<c>"')
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="reserved; runs are deterministic")
        if scheme:
            sp.add_argument("--scheme", choices=("cimrak", "gao", "an"), default=None)
        if measurement:
            sp.add_argument("--measurement", choices=("edge", "volume"), default=None)
        if form:
            sp.add_argument("--form", choices=("v1", "v2", "mixed"), default=None)
        if layers:
            sp.add_argument("--layers", default=None, help="localization layers; 'saturated' for global")
        if tau:
            sp.add_argument("--tau", default=None, help="coarse time step: H, H2 or a float")
        if run:
            sp.add_argument("--T", type=float, default=None)
            sp.add_argument("--lambda", dest="lam", type=float, default=None)

    sp = sub.add_parser("mesh-info", help="print hierarchy facts for a mesh")
    common(sp)

    sp = sub.add_parser("basis", help="build a basis family, cache it, emit its decay table")
    common(sp, measurement=True, form=True, layers=True)
    sp.add_argument("--decay-center", type=int, default=None)
    sp.add_argument("--decay-layers", default="2,3,4,5,6")

    sp = sub.add_parser("solve-fine", help="reference fine-mesh run")
    common(sp, scheme=True, tau=True, run=True)
    sp.add_argument("--snapshot-stride", type=int, default=None)

    sp = sub.add_parser("solve-ms", help="coarse-space run (algorithm 1 or 2)")
    common(sp, scheme=True, measurement=True, form=True, layers=True, tau=True, run=True)
    sp.add_argument("--length-preserving", action="store_true", default=None)
    sp.add_argument("--accelerated", action="store_true", default=None)
    sp.add_argument("--snapshot-stride", type=int, default=None)

    sp = sub.add_parser("convergence", help="rate study across schemes and coarse sizes")
    common(sp, form=True, layers=True, run=True)
    sp.add_argument("--schemes", default=None, help="comma list, default all three")
    sp.add_argument("--fine-divisions", type=int, default=None)
    sp.add_argument("--paper-scale", action="store_true", default=None)
    sp.add_argument("--algorithm", type=int, choices=(1, 2), default=None)
    sp.add_argument("--cells", default=None, help="semicolon list like volume:H2;edge:H")

    sp = sub.add_parser("timing", help="pipeline wall-clock roles at the configured scale")
    common(sp, form=True, layers=True, run=True)
    sp.add_argument("--fine-divisions", type=int, default=None)
    sp.add_argument("--paper-scale", action="store_true", default=None)
    return p


def _merge_config(args, parser):
    """Fill argparse Namespace holes from the config file, if given."""
    if not args.config:
        return args
    overrides = load_config_file(args.config)
    for key, val in overrides.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) is None:
            cast = {"refine_J": int, "T": float, "lam": float, "seed": int,
                    "fine_divisions": int, "snapshot_stride": int, "algorithm": int,
                    "decay_center": int}.get(key, str)
            if key in ("length_preserving", "accelerated", "paper_scale"):
                setattr(args, key, val.lower() in ("1", "true", "yes"))
            else:
                setattr(args, key, cast(val))
    return args


def _req(args, name, default=None):
    val = getattr(args, name, None)
    if val is None:
        if default is None:
            raise SystemExit(f"missing required option --{name.replace('_', '-')}")
        return default
    return val


def _out_dir(args):
    out = getattr(args, "out", None) or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_mesh_info(args):
    n_c = int(_req(args, "nc"))
    J = _req(args, "refine_J", 0)
    mesh = build_hier_mesh(n_c, J)
    print(f"coarse divisions  : {mesh.n_c}  (H = {mesh.H:g})")
    print(f"refinements       : {mesh.refine_j}  (h = {mesh.h:g})")
    print(f"coarse triangles  : {mesh.n_coarse_triangles}")
    print(f"fine triangles    : {mesh.n_fine_triangles}")
    print(f"fine nodes        : {mesh.n_fine_nodes}")
    print(f"fine edges        : {mesh.fine_edges.shape[0]}")
    print(f"boundary nodes    : {int(mesh.boundary_node.sum())}")
    return 0


def cmd_basis(args):
    n_c = int(_req(args, "nc"))
    J = _req(args, "refine_J", 0)
    kind = _req(args, "measurement", "volume")
    form = _req(args, "form", "v1")
    if form == "mixed":
        raise SystemExit("basis caching works per form; build v1 and v2 separately")
    layers = _parse_layers(getattr(args, "layers", None))
    kappa = parse_coefficient(_req(args, "coeff", "mstrig"))
    out = _out_dir(args)
    mesh = build_hier_mesh(n_c, J)
    meas = build_measurements(mesh, kind)
    basis = build_basis_set(mesh, kappa, form, meas, layer=layers)
    violation = max_constraint_violation(basis, meas)
    tag = "sat" if layers is None else f"l{layers}"
    cache = os.path.join(out, f"basis_{kind}_{form}_nc{n_c}_J{J}_{tag}.grpsbas")
    save_basis(cache, basis)
    print(f"built {basis.count} columns; constraint violation {violation:.3e}")
    print(f"cache: {cache}")

    center = getattr(args, "decay_center", None)
    if center is None:
        from .harness import interior_centers

        interior = interior_centers(mesh, meas)
        center = interior[len(interior) // 2] if interior else 0
    decay_layers = [int(s) for s in str(getattr(args, "decay_layers", "2,3,4,5,6")).split(",")]
    from .basis import decay_profile

    rows = []
    for entry in decay_profile(mesh, kappa, form, meas, center, decay_layers):
        for norm in ("l2", "h1", "energy", "linf"):
            rows.append({"center": center, "layer": entry["layer"], "norm": norm, "ratio": entry[norm]})
    decay_path = os.path.join(out, "decay.csv")
    write_csv(decay_path, DECAY_COLUMNS, rows)
    write_manifest(os.path.join(out, "run-manifest.txt"), {
        "command": "basis", "nc": n_c, "refine_J": J, "measurement": kind, "form": form,
        "layers": "saturated" if layers is None else layers, "coeff": kappa.name,
        "constraint_violation": violation, "decay_center": center,
    })
    print(f"decay table: {decay_path}")
    return 0


def cmd_solve_fine(args):
    n_c = int(_req(args, "nc"))
    J = _req(args, "refine_J", 0)
    scheme = _req(args, "scheme", "gao")
    kappa = parse_coefficient(_req(args, "coeff", "mstrig"))
    T = _req(args, "T", 1.0)
    lam = _req(args, "lam", 1.0)
    out = _out_dir(args)
    mesh = build_hier_mesh(n_c, J)
    dt = _tau_value(_req(args, "tau", str(mesh.h**2)), n_c)
    cfg = SchemeConfig(scheme, dt=dt, lam=lam)
    m0 = default_initial_field(mesh.n_fine_nodes)
    run = run_reference(cfg, mesh, kappa, m0, T, snapshot_stride=getattr(args, "snapshot_stride", None))
    for step, fld in run.snapshots:
        write_snapshot_csv(os.path.join(out, f"snapshot_{step:06d}.csv"), mesh, fld)
    write_manifest(os.path.join(out, "run-manifest.txt"), {
        "command": "solve-fine", "nc": n_c, "refine_J": J, "scheme": scheme,
        "coeff": kappa.name, "dt": dt, "T": T, "lambda": lam,
        "steps": run.n_steps, "wall_time": run.wall_time,
        "energy_initial": run.diagnostics["energy_initial"],
        "energy_final": run.diagnostics["energy_final"],
        "deviation_final": run.diagnostics["deviation_final"],
    })
    print(f"{run.n_steps} steps in {run.wall_time:.2f}s; "
          f"deviation {run.diagnostics['deviation_final']:.3e}; outputs in {out}")
    return 0


def cmd_solve_ms(args):
    n_c = int(_req(args, "nc"))
    J = _req(args, "refine_J", 0)
    scheme = _req(args, "scheme", "gao")
    kind = _req(args, "measurement", "volume")
    form = _req(args, "form", "mixed")
    layers = _parse_layers(getattr(args, "layers", None))
    kappa = parse_coefficient(_req(args, "coeff", "mstrig"))
    T = _req(args, "T", 1.0)
    lam = _req(args, "lam", 1.0)
    tau = _tau_value(_req(args, "tau", "H2"), n_c)
    accelerated = bool(getattr(args, "accelerated", None))
    preserving = bool(getattr(args, "length_preserving", None))
    out = _out_dir(args)

    mesh = build_hier_mesh(n_c, J)
    meas = build_measurements(mesh, kind)
    bases = make_component_bases(mesh, kappa, meas, form=form, layer=layers)
    cfg = SchemeConfig(scheme, dt=tau, lam=lam)
    tensors = None
    if accelerated and scheme == "cimrak":
        tensors = precompute_tensors(mesh, kappa, bases,
                                     cache_key=tensor_cache_key(mesh, kappa, bases))
        save_tensors(os.path.join(out, "tensors.bin"), tensors)
    runner = run_algorithm2 if preserving else run_algorithm1
    run = runner(cfg, mesh, kappa, bases, m0=default_initial_field(mesh.n_fine_nodes), T=T,
                 accelerated=accelerated, tensors=tensors,
                 snapshot_stride=getattr(args, "snapshot_stride", None))
    for step, fld in run.snapshots:
        write_snapshot_csv(os.path.join(out, f"snapshot_{step:06d}.csv"), mesh, fld)
    write_manifest(os.path.join(out, "run-manifest.txt"), {
        "command": "solve-ms", "nc": n_c, "refine_J": J, "scheme": scheme,
        "measurement": kind, "form": form,
        "layers": "saturated" if layers is None else layers,
        "coeff": kappa.name, "tau": tau, "T": T, "lambda": lam,
        "algorithm": 2 if preserving else 1, "accelerated": accelerated,
        "steps": run.n_steps, "wall_time": run.wall_time,
        "deviation_final": run.diagnostics["deviation_final"],
    })
    print(f"{run.n_steps} coarse steps in {run.wall_time:.2f}s; outputs in {out}")
    return 0


def _study_config(args):
    kwargs = {}
    if getattr(args, "fine_divisions", None):
        kwargs["fine_divisions"] = args.fine_divisions
    if getattr(args, "nc", None):
        kwargs["nc_list"] = tuple(int(s) for s in str(args.nc).split(","))
    if getattr(args, "schemes", None):
        kwargs["schemes"] = tuple(str(args.schemes).split(","))
    if getattr(args, "cells", None):
        kwargs["cells"] = tuple(tuple(c.split(":")) for c in str(args.cells).split(";"))
    if getattr(args, "form", None):
        kwargs["form"] = args.form
    if getattr(args, "layers", None) is not None:
        kwargs["layers"] = _parse_layers(args.layers)
    if getattr(args, "algorithm", None):
        kwargs["algorithm"] = args.algorithm
    if getattr(args, "T", None):
        kwargs["T"] = args.T
    if getattr(args, "lam", None):
        kwargs["lam"] = args.lam
    if getattr(args, "coeff", None):
        kwargs["coeff"] = args.coeff
    if getattr(args, "paper_scale", None):
        kwargs["paper_scale"] = True
    if getattr(args, "seed", None) is not None:
        kwargs["seed"] = args.seed
    kwargs["out_dir"] = _out_dir(args)
    return StudyConfig(**kwargs)


def cmd_convergence(args):
    cfg = _study_config(args)
    report = convergence_study(cfg, progress=lambda msg: print(msg, flush=True))
    for row in report.rates:
        print(f"rate {row['scheme']}/{row['measurement']}/{row['tau_mode']}: {row['rate_h1']:.4f}")
    print(f"outputs in {cfg.out_dir}")
    return 0


def cmd_timing(args):
    cfg = _study_config(args)
    rows = timing_report(cfg, progress=lambda msg: print(msg, flush=True))
    for row in rows:
        print(f"{row['label']} N_c={row['n_c']}: {row['seconds']:.4g}s  ({row['note']})")
    print(f"outputs in {cfg.out_dir}")
    return 0


_COMMANDS = {
    "mesh-info": cmd_mesh_info,
    "basis": cmd_basis,
    "solve-fine": cmd_solve_fine,
    "solve-ms": cmd_solve_ms,
    "convergence": cmd_convergence,
    "timing": cmd_timing,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = _merge_config(args, parser)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
