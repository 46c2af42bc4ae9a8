"""Time integration in fine space and in the coarse basis space.

The baseline coarse step assembles the scheme system on the fine mesh and
projects it onto the component bases by congruence.  The accelerated step
replaces the per-step fine traversal with contractions of precomputed
3-index basis tensors; it implements the implicit-product variant of the
``cimrak`` scheme, where the scalar magnetization-field product is
rewritten through gradient/transverse magnitudes and projected onto the
coarse space by an L2 Gram solve.

Component basis assignment: component 1 uses the exchange-form basis and
components 2, 3 the exchange-plus-mass form when ``form="mixed"``; a single
shared family is used for ``form="v1"`` or ``form="v2"``.
"""

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _kernels
from .assembly import (
    AssemblyContext,
    as_vector_field,
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_mass,
    ll_energy,
)
from .basis import build_basis_set, identity_basis
from .schemes import (
    COUPLE_SIGN_A,
    CROSS_SIGN_A,
    FineSystemBuilder,
    SchemeConfig,
    StepSolver,
    unit_length_deviation,
)

__all__ = [
    "ComponentBases",
    "CoarseState",
    "Trajectory",
    "TripleTensorSet",
    "make_component_bases",
    "interpolate_initial",
    "expand_trace",
    "normalize_state",
    "CoarseStepper",
    "AcceleratedStepper",
    "make_stepper",
    "run_algorithm1",
    "run_algorithm2",
    "run_reference",
    "precompute_tensors",
    "p_grps",
    "projected_substituted_system",
    "write_snapshot_csv",
    "save_tensors",
    "load_tensors",
    "tensor_cache_key",
]

log = logging.getLogger(__name__)



@dataclass
class ComponentBases:
    """Per-component basis sets sharing one measurement family."""

    sets: tuple
    measurements: object
    form: str
    _proj: np.ndarray = field(default=None, repr=False)

    @property
    def counts(self):
        return [b.count for b in self.sets]

    @property
    def n_fine(self):
        return self.sets[0].n_fine

    def distinct(self):
        """Unique basis sets with the components that use them."""
        out = []
        for c, b in enumerate(self.sets):
            for entry in out:
                if entry[0] is b:
                    entry[1].append(c)
                    break
            else:
                out.append([b, [c]])
        return out

    def projection_dense(self):
        """Dense block-diagonal fine-from-coarse map, cached."""
        if self._proj is None:
            self._proj = np.asarray(
                sp.block_diag([b.columns for b in self.sets]).todense()
            )
        return self._proj


def make_component_bases(mesh, kappa, measurements, form, layer=None, context=None):
    """Build the component basis assignment for a variational form choice."""
    ctx = context or AssemblyContext(mesh, kappa)
    if form == "v1":
        b = build_basis_set(mesh, kappa, "v1", measurements, layer=layer, context=ctx)
        sets = (b, b, b)
    elif form == "v2":
        b = build_basis_set(mesh, kappa, "v2", measurements, layer=layer, context=ctx)
        sets = (b, b, b)
    elif form == "mixed":
        b1 = build_basis_set(mesh, kappa, "v1", measurements, layer=layer, context=ctx)
        b2 = build_basis_set(mesh, kappa, "v2", measurements, layer=layer, context=ctx)
        sets = (b1, b2, b2)
    else:
        raise ValueError(f"unknown form {form!r}; choose v1, v2 or mixed")
    return ComponentBases(sets=sets, measurements=measurements, form=form)


def identity_component_bases(mesh):
    """Full fine-space bases; coarse runs with these reproduce fine runs."""
    basis, meas = identity_basis(mesh)
    return ComponentBases(sets=(basis, basis, basis), measurements=meas, form="identity")


@dataclass
class CoarseState:
    """Coarse coefficients with an optional cached fine-node expansion.

    States created by interpolation or stepping satisfy trace = basis
    columns times coefficients; a normalized state instead carries the
    nodewise unit fine field with freshly re-interpolated coefficients
    (the unit projection happens on the fine trace, never on coefficients).
    """

    coeffs: list
    trace: np.ndarray | None = None
    normalized: bool = False

    def trace_on(self, bases):
        if self.trace is None:
            self.trace = expand_trace(bases, self.coeffs)
        return self.trace


def expand_trace(bases, coeffs):
    """Fine nodal expansion of per-component coarse coefficients."""
    n = bases.n_fine
    out = np.empty((3, n))
    for c in range(3):
        out[c] = bases.sets[c].columns @ coeffs[c]
    return out


def interpolate_initial(measurements, bases, m0):
    """Measurement interpolation of initial fine data onto the coarse space."""
    m0 = as_vector_field(m0)
    coeffs = [np.asarray(measurements.matrix @ m0[c]) for c in range(3)]
    state = CoarseState(coeffs=coeffs)
    state.trace = expand_trace(bases, coeffs)
    return state


def normalize_state(state, bases):
    """Nodewise unit projection of the fine trace with re-interpolation.

    The coarse coefficients are recomputed from the measurements applied
    to the normalized trace; dividing coefficients directly would absorb
    the measurement scaling into the state.
    """
    trace = state.trace_on(bases)
    mags = np.sqrt((trace**2).sum(axis=0))
    bad = np.flatnonzero(mags < 1e-14)
    if bad.size:
        raise ValueError(f"zero-magnitude magnetization at fine node {bad[0]}; cannot normalize")
    unit = trace / mags
    coeffs = [np.asarray(bases.measurements.matrix @ unit[c]) for c in range(3)]
    return CoarseState(coeffs=coeffs, trace=unit, normalized=True)


class CoarseStepper:
    """Galerkin coarse step: fine assembly + congruence projection.

    ``h_eff_mode="coarse"`` evaluates the effective field entering the
    scalar product terms in the coarse space itself (Gram solve against
    the basis) instead of the fine lumped-mass inversion; the coarse field
    is essential for localized bases, whose truncation roughness otherwise
    feeds back through the fine-mesh field and destabilizes the loop.
    """

    def __init__(self, config, mesh, kappa, bases, context=None, h_eff_mode="coarse"):
        self.config = config
        self.mesh = mesh
        self.bases = bases
        self.builder = FineSystemBuilder(mesh, kappa, config, context=context)
        self.P = bases.projection_dense()
        self.h_eff_mode = h_eff_mode
        if h_eff_mode not in ("coarse", "fine-lumped"):
            raise ValueError(f"unknown h_eff_mode {h_eff_mode!r}")

    def _coarse_effective_field(self, state):
        """Galerkin effective field: (h, psi) = -(kappa grad m, grad psi) - (m_a, psi)."""
        bases = self.bases
        trace = state.trace_on(bases)
        h = np.empty_like(trace)
        for c in range(3):
            cols = bases.sets[c].columns
            rhs = -np.asarray(cols.T @ (self.builder.K @ trace[c]))
            if self.config.anisotropy and c >= 1:
                rhs -= np.asarray(cols.T @ (self.builder.M @ trace[c]))
            gram = bases.sets[c].gram
            h[c] = cols @ sla.solve(gram, rhs, assume_a="pos")
        return h

    def step(self, state, step_index=None):
        h_prev = None
        if self.h_eff_mode == "coarse" and self.config.scheme in ("cimrak", "gao"):
            h_prev = self._coarse_effective_field(state)
        system = self.builder.assemble(
            state.trace_on(self.bases), step_index=step_index, h_eff_prev=h_prev
        )
        AP = system.matrix @ self.P
        AH = self.P.T @ AP
        fH = self.P.T @ system.rhs
        try:
            sol = sla.solve(AH, fH)
        except np.linalg.LinAlgError as err:
            raise RuntimeError(f"coarse matrix singular at step {step_index}: {err}") from err
        res = np.linalg.norm(AH @ sol - fH) / max(np.linalg.norm(fH), 1e-300)
        if res > 1e-8:
            raise RuntimeError(f"coarse solve residual {res:.2e} at step {step_index}")
        counts = self.bases.counts
        offs = np.cumsum([0] + counts)
        coeffs = [sol[offs[c] : offs[c + 1]] for c in range(3)]
        new = CoarseState(coeffs=coeffs)
        new.trace = expand_trace(self.bases, coeffs)
        return new


# ---------------------------------------------------------------------------
# triple-tensor precomputation
# ---------------------------------------------------------------------------


@dataclass
class TensorCOO:
    """Sparse 3-index tensor: entry (k, j, i) -> value; k weights, j trial, i test."""

    kk: np.ndarray
    jj: np.ndarray
    ii: np.ndarray
    vals: np.ndarray
    shape: tuple

    @property
    def nnz(self):
        return self.vals.size

    def contract_weight(self, x):
        """Dense (n_test, n_trial) matrix sum_k x_k T[k, :, :]."""
        return _kernels.contract_weight(self.kk, self.jj, self.ii, self.vals, x, self.shape[1], self.shape[2])

    def contract_pair(self, a, b):
        """Vector over the test axis: d_i = sum_{k,j} a_k b_j T[k, j, i]."""
        return _kernels.contract_pair(self.kk, self.jj, self.ii, self.vals, a, b, self.shape[2])


@dataclass
class TripleTensorSet:
    """Precomputed basis tensors for fine-traversal-free coarse stepping.

    ``blocks`` maps (kind, weight-component, trial-component, test-component)
    to sparse tensors; kinds are "grad" (gradient-pair against test),
    "mass3" (plain triple product), "kmass3" (coefficient-weighted triple
    product) and "kgrad" (coefficient-weighted value-gradient-gradient,
    matching the 3-point cross-term rule).  Entries exist only where the
    three supports overlap.
    """

    blocks: dict
    grams: list  # dense per component
    kstiff: list  # dense projected weighted stiffness per component
    proj_comp: int
    counts: list
    cache_key: str = ""

    def block(self, kind, a, b, c):
        return self.blocks[(kind, a, b, c)]


def _component_triples():
    """All (kind, weight, trial, test) component triples the stepper uses."""
    need = set()
    p = 0  # projection component
    for (c, b), (_, a) in CROSS_SIGN_A.items():
        need.add(("kgrad", a, b, c))
    for (c, b), (_, a) in COUPLE_SIGN_A.items():
        need.add(("mass3", a, b, c))
    for c in range(3):
        need.add(("kmass3", p, c, c))
        need.add(("mass3", p, c, c))
        need.add(("grad", c, c, p))
    for c in (1, 2):
        need.add(("mass3", c, c, p))
    return sorted(need)


def _alive_layout(mesh, columns):
    """CSR triangle -> alive-basis layout with nodal values and gradients."""
    n_t = mesh.n_fine_triangles
    cols = columns.tocsc()
    pair_tri = []
    pair_col = []
    for k in range(cols.shape[1]):
        nodes = cols.indices[cols.indptr[k] : cols.indptr[k + 1]]
        if nodes.size == 0:
            continue
        tris = np.unique(
            np.concatenate([mesh.triangles_of_node(nd) for nd in nodes])
        )
        pair_tri.append(tris)
        pair_col.append(np.full(tris.size, k, dtype=np.int32))
    pair_tri = np.concatenate(pair_tri)
    pair_col = np.concatenate(pair_col)
    order = np.lexsort((pair_col, pair_tri))
    pair_tri = pair_tri[order]
    pair_col = pair_col[order]
    ptr = np.zeros(n_t + 1, dtype=np.int64)
    np.add.at(ptr, pair_tri + 1, 1)
    np.cumsum(ptr, out=ptr)
    # nodal values of each alive basis on its triangle
    tri_nodes = mesh.fine_triangles[pair_tri]
    dense = np.zeros(mesh.n_fine_nodes)
    vals = np.empty((pair_tri.size, 3))
    for k in range(cols.shape[1]):
        sel = np.flatnonzero(pair_col == k)
        if sel.size == 0:
            continue
        lo, hi = cols.indptr[k], cols.indptr[k + 1]
        dense[cols.indices[lo:hi]] = cols.data[lo:hi]
        vals[sel] = dense[tri_nodes[sel]]
        dense[cols.indices[lo:hi]] = 0.0
    return ptr, pair_col, vals, pair_tri


def precompute_tensors(mesh, kappa, bases, context=None, cache_key=""):
    """Assemble the sparse triple tensors over the combined component bases.

    All component bases are concatenated so mixed-form blocks come out of
    one accumulation per tensor kind; the needed component blocks are then
    sliced to sparse storage.  Dense working memory is (combined count)^3.
    """
    ctx = context or AssemblyContext(mesh, kappa)
    distinct = bases.distinct()
    offsets = {}
    off = 0
    parts = []
    for b, comps in distinct:
        for c in comps:
            offsets[c] = (off, off + b.count)
        parts.append(b.columns)
        off += b.count
    combined = sp.hstack(parts, format="csc")
    total = combined.shape[1]
    if total**3 * 8 > 2**31:
        log.warning("tensor accumulation buffer is %.1f GiB", total**3 * 8 / 2**30)

    ptr, idx, vals, pair_tri = _alive_layout(mesh, combined)
    grads = np.einsum("pl,plk->pk", vals, ctx.grads[pair_tri])
    area = ctx.area
    ones6 = np.ones_like(ctx.kq6)

    cubes = {}
    for kind in ("mass3", "kmass3", "kgrad", "grad"):
        cube = np.zeros((total, total, total))
        if kind == "mass3":
            _kernels.triple_mass_accumulate(ptr, idx, vals, area, ctx.w6, ones6, ctx.shp6, cube)
        elif kind == "kmass3":
            _kernels.triple_mass_accumulate(ptr, idx, vals, area, ctx.w6, ctx.kq6, ctx.shp6, cube)
        elif kind == "kgrad":
            _kernels.triple_gradmass_accumulate(ptr, idx, vals, grads, area, ctx.w3, ctx.kq3, ctx.shp3, cube)
        else:
            _kernels.triple_gradgrad_mass_accumulate(ptr, idx, vals, grads, area, ctx.w6, ctx.shp6, cube)
        cubes[kind] = cube

    blocks = {}
    for kind, a, b, c in _component_triples():
        ka = slice(*offsets[a])
        jb = slice(*offsets[b])
        ic = slice(*offsets[c])
        sub = cubes[kind][ka, jb, ic]
        kk, jj, ii = np.nonzero(sub)
        blocks[(kind, a, b, c)] = TensorCOO(
            kk=kk.astype(np.int32),
            jj=jj.astype(np.int32),
            ii=ii.astype(np.int32),
            vals=sub[kk, jj, ii].copy(),
            shape=sub.shape,
        )
    del cubes

    M = assemble_mass(mesh, context=ctx)
    K = assemble_stiffness(mesh, kappa, context=ctx)
    grams = []
    kstiff = []
    for c in range(3):
        cols = bases.sets[c].columns
        grams.append(np.asarray((cols.T @ (M @ cols)).todense()))
        kstiff.append(np.asarray((cols.T @ (K @ cols)).todense()))
    return TripleTensorSet(
        blocks=blocks,
        grams=grams,
        kstiff=kstiff,
        proj_comp=0,
        counts=bases.counts,
        cache_key=cache_key,
    )


def p_grps(tensors, coeffs, which="gradient"):
    """L2-project a quadratic magnetization functional onto the coarse space.

    ``which="gradient"`` projects |grad m|^2 using the gradient-pair
    tensors; ``which="anisotropy"`` projects m2^2 + m3^2 using the triple
    products.  Solves the Gram system of the projection component's basis.
    """
    p = tensors.proj_comp
    np_ = tensors.counts[p]
    d = np.zeros(np_)
    if which == "gradient":
        for c in range(3):
            d += tensors.block("grad", c, c, p).contract_pair(coeffs[c], coeffs[c])
    elif which == "anisotropy":
        for c in (1, 2):
            d += tensors.block("mass3", c, c, p).contract_pair(coeffs[c], coeffs[c])
    else:
        raise ValueError(f"unknown projection target {which!r}")
    rho = sla.solve(tensors.grams[p], d, assume_a="pos")
    return rho


class AcceleratedStepper:
    """Coarse step through precomputed tensor contractions (cimrak form).

    Per-step cost depends only on tensor sparsity and basis counts, not on
    the fine mesh; the fine trace is expanded lazily on demand.
    """

    def __init__(self, config, bases, tensors):
        if config.scheme != "cimrak":
            raise ValueError("accelerated stepping implements the cimrak scheme only")
        self.config = config
        self.bases = bases
        self.tensors = tensors
        lam = config.lam
        self._const = []
        for c in range(3):
            blk = tensors.grams[c] / config.dt + lam * tensors.kstiff[c]
            if config.anisotropy and c >= 1:
                blk = blk + lam * tensors.grams[c]
            self._const.append(blk)
        self._offs = np.cumsum([0] + tensors.counts)

    def build_system(self, state):
        """Dense coarse system (matrix, rhs) for the next step."""
        cfg = self.config
        lam = cfg.lam
        t = self.tensors
        coeffs = state.coeffs
        p = t.proj_comp
        rho_g = p_grps(t, coeffs, "gradient")
        rho_a = p_grps(t, coeffs, "anisotropy") if cfg.anisotropy else None

        offs = self._offs
        ntot = offs[-1]
        A = np.zeros((ntot, ntot))
        rhs = np.empty(ntot)
        for c in range(3):
            blk = self._const[c].copy()
            blk -= lam * t.block("kmass3", p, c, c).contract_weight(rho_g)
            if cfg.anisotropy:
                blk -= lam * t.block("mass3", p, c, c).contract_weight(rho_a)
            A[offs[c] : offs[c + 1], offs[c] : offs[c + 1]] += blk
            rhs[offs[c] : offs[c + 1]] = t.grams[c] @ coeffs[c] / cfg.dt
        for (c, b), (sign, a) in CROSS_SIGN_A.items():
            A[offs[c] : offs[c + 1], offs[b] : offs[b + 1]] += sign * t.block("kgrad", a, b, c).contract_weight(coeffs[a])
        if cfg.anisotropy:
            for (c, b), (sign, a) in COUPLE_SIGN_A.items():
                A[offs[c] : offs[c + 1], offs[b] : offs[b + 1]] += sign * t.block("mass3", a, b, c).contract_weight(coeffs[a])
        return A, rhs

    def step(self, state, step_index=None):
        A, rhs = self.build_system(state)
        try:
            sol = sla.solve(A, rhs)
        except np.linalg.LinAlgError as err:
            raise RuntimeError(f"coarse matrix singular at step {step_index}: {err}") from err
        offs = self._offs
        coeffs = [sol[offs[c] : offs[c + 1]] for c in range(3)]
        return CoarseState(coeffs=coeffs)


def projected_substituted_system(config, mesh, kappa, bases, tensors, state, context=None):
    """Coarse system from fine assembly with the projected quadratic fields.

    Independent reference for the accelerated path: the implicit
    magnetization-field product is replaced by the same L2-projected
    gradient/transverse magnitudes, expanded to fine fields, assembled with
    matching quadrature, and projected by congruence.
    """
    if config.scheme != "cimrak":
        raise ValueError("substituted assembly implements the cimrak scheme only")
    ctx = context or AssemblyContext(mesh, kappa)
    lam = config.lam
    p = tensors.proj_comp
    coeffs = state.coeffs
    rho_g = p_grps(tensors, coeffs, "gradient")
    pg_field = bases.sets[p].columns @ rho_g
    trace = state.trace_on(bases)

    cfg_gao = SchemeConfig("gao", dt=config.dt, lam=lam, anisotropy=config.anisotropy)
    builder = FineSystemBuilder(mesh, kappa, cfg_gao, context=ctx)
    system = builder.assemble(trace)
    A = system.matrix  # core + cross + coupling; gao adds no matrix extras
    sub = assemble_weighted_mass(mesh, pg_field, context=ctx, with_kappa=True)
    if config.anisotropy:
        rho_a = p_grps(tensors, coeffs, "anisotropy")
        pa_field = bases.sets[p].columns @ rho_a
        sub = sub + assemble_weighted_mass(mesh, pa_field, context=ctx)
    A = A - lam * sp.block_diag([sub] * 3, format="csr")

    P = bases.projection_dense()
    AH = P.T @ (A @ P)
    n = ctx.n
    rhs = np.empty(3 * n)
    M = assemble_mass(mesh, context=ctx)
    for c in range(3):
        rhs[c * n : (c + 1) * n] = M @ trace[c] / config.dt
    fH = P.T @ rhs
    return AH, fH


def make_stepper(config, mesh, kappa, bases, accelerated=False, tensors=None, context=None):
    """Baseline or accelerated coarse stepper; non-cimrak accelerated
    requests fall back to the baseline path with a warning."""
    if accelerated:
        if config.scheme != "cimrak":
            log.warning(
                "accelerated stepping covers the cimrak scheme only; falling back to baseline for %s",
                config.scheme,
            )
        else:
            if tensors is None:
                tensors = precompute_tensors(mesh, kappa, bases, context=context)
            return AcceleratedStepper(config, bases, tensors)
    return CoarseStepper(config, mesh, kappa, bases, context=context)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Run record: final field plus snapshot fields at stride steps."""

    final: np.ndarray
    n_steps: int
    dt: float
    snapshots: list  # (step, (3, n) field)
    wall_time: float
    step_time: float
    states: list = None  # coarse runs: (step, CoarseState)
    diagnostics: dict = None


def _step_count(T, dt):
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(abs(T), 1.0):
        log.warning("final time %.6g is not a multiple of dt %.6g; running %d steps", T, dt, n)
    return max(n, 0)


def run_reference(config, mesh, kappa, m0, T, solver_mode="lagged", snapshot_stride=None,
                  context=None, monitor_energy=False):
    """Fine-space time loop; the reference for every coarse comparison.

    ``monitor_energy`` logs a warning whenever a step raises the energy by
    more than 1e-6 relative (diagnostic only; endpoints are always in the
    returned diagnostics).
    """
    m0 = as_vector_field(m0, mesh)
    builder = FineSystemBuilder(mesh, kappa, config, context=context)
    solver = StepSolver(solver_mode)
    n_steps = _step_count(T, config.dt)
    n = mesh.n_fine_nodes
    m = m0.copy()
    snaps = [(0, m0.copy())]
    project = config.scheme == "an" and config.an_projection
    energy_prev = ll_energy(mesh, kappa, m0, context=builder.ctx) if monitor_energy else None
    t_start = time.perf_counter()
    t_steps = 0.0
    for k in range(n_steps):
        t0 = time.perf_counter()
        system = builder.assemble(m, step_index=k)
        x = solver.solve(system.matrix, system.rhs)
        m = x.reshape(3, n)
        if project:
            mags = np.sqrt((m**2).sum(axis=0))
            bad = np.flatnonzero(mags < 1e-14)
            if bad.size:
                raise ValueError(f"zero-magnitude magnetization at fine node {bad[0]} in step {k}")
            m = m / mags
        t_steps += time.perf_counter() - t0
        if monitor_energy:
            energy = ll_energy(mesh, kappa, m, context=builder.ctx)
            if energy > energy_prev * (1.0 + 1e-6) + 1e-14:
                log.warning("energy rose at step %d: %.6e -> %.6e", k, energy_prev, energy)
            energy_prev = energy
        if snapshot_stride and (k + 1) % snapshot_stride == 0:
            snaps.append((k + 1, m.copy()))
    wall = time.perf_counter() - t_start
    if not snaps or snaps[-1][0] != n_steps:
        snaps.append((n_steps, m.copy()))
    diags = {
        "energy_initial": ll_energy(mesh, kappa, m0, context=builder.ctx),
        "energy_final": ll_energy(mesh, kappa, m, context=builder.ctx),
        "deviation_final": unit_length_deviation(mesh, m, context=builder.ctx),
        "factorizations": solver.factorizations,
    }
    return Trajectory(
        final=m, n_steps=n_steps, dt=config.dt, snapshots=snaps, wall_time=wall,
        step_time=t_steps, diagnostics=diags,
    )


def _run_coarse(config, mesh, kappa, bases, m0, T, stepper, length_preserving, snapshot_stride=None):
    m0 = as_vector_field(m0, mesh)
    n_steps = _step_count(T, config.dt)
    state = interpolate_initial(bases.measurements, bases, m0)
    states = [(0, state)]
    snaps = [(0, state.trace_on(bases).copy())]
    project = config.scheme == "an" and config.an_projection
    t_start = time.perf_counter()
    t_steps = 0.0
    for k in range(n_steps):
        if length_preserving:
            state = normalize_state(state, bases)
        t0 = time.perf_counter()
        state = stepper.step(state, step_index=k)
        if project:
            state = normalize_state(state, bases)
        t_steps += time.perf_counter() - t0
        if snapshot_stride and (k + 1) % snapshot_stride == 0:
            states.append((k + 1, state))
            snaps.append((k + 1, state.trace_on(bases).copy()))
    if length_preserving:
        state = normalize_state(state, bases)
    wall = time.perf_counter() - t_start
    final = state.trace_on(bases)
    if not snaps or snaps[-1][0] != n_steps:
        states.append((n_steps, state))
        snaps.append((n_steps, final.copy()))
    diags = {"deviation_final": unit_length_deviation(mesh, final)}
    return Trajectory(
        final=final, n_steps=n_steps, dt=config.dt, snapshots=snaps, wall_time=wall,
        step_time=t_steps, states=states, diagnostics=diags,
    )


def run_algorithm1(config, mesh, kappa, bases, m0, T, accelerated=False, tensors=None,
                   snapshot_stride=None, context=None):
    """Length-relaxing coarse evolution: interpolate once, then step."""
    stepper = make_stepper(config, mesh, kappa, bases, accelerated, tensors, context=context)
    return _run_coarse(config, mesh, kappa, bases, m0, T, stepper, False, snapshot_stride)


def run_algorithm2(config, mesh, kappa, bases, m0, T, accelerated=False, tensors=None,
                   snapshot_stride=None, context=None):
    """Length-preserving coarse evolution: normalize the fine trace before
    each step (and at the end), re-interpolating coefficients each time."""
    stepper = make_stepper(config, mesh, kappa, bases, accelerated, tensors, context=context)
    return _run_coarse(config, mesh, kappa, bases, m0, T, stepper, True, snapshot_stride)


# ---------------------------------------------------------------------------
# snapshot CSV and tensor cache
# ---------------------------------------------------------------------------


def write_snapshot_csv(path, mesh, m):
    """Write one magnetization snapshot: node index, coordinates, components."""
    m = as_vector_field(m, mesh)
    with open(path, "w", newline="") as f:
        f.write("node,x,y,m1,m2,m3\n")
        for i in range(mesh.n_fine_nodes):
            x, y = mesh.fine_nodes[i]
            f.write(f"{i},{x:.17g},{y:.17g},{m[0, i]:.17g},{m[1, i]:.17g},{m[2, i]:.17g}\n")


def _basis_digest(basis):
    cols = basis.columns.tocsc()
    h = hashlib.sha256()
    h.update(cols.indptr.astype("<i8").tobytes())
    h.update(cols.indices.astype("<i4").tobytes())
    h.update(cols.data.astype("<f8").tobytes())
    return h.hexdigest()


def tensor_cache_key(mesh, kappa, bases):
    """Digest of (mesh, coefficient name, basis contents) for the cache."""
    h = hashlib.sha256()
    h.update(f"{mesh.n_c}:{mesh.refine_j}:{kappa.name}".encode())
    for b in bases.sets:
        h.update(_basis_digest(b).encode())
    return h.hexdigest()


_TENSOR_MAGIC = b"GRPSTEN1"
_KIND_TAGS = {"grad": 1, "mass3": 2, "kmass3": 3, "kgrad": 4}
_KIND_NAMES = {v: k for k, v in _KIND_TAGS.items()}


def save_tensors(path, tensors):
    """Write a tensor set keyed by its cache digest."""
    with open(path, "wb") as f:
        f.write(_TENSOR_MAGIC)
        key = tensors.cache_key.encode()
        f.write(struct.pack("<I", len(key)))
        f.write(key)
        f.write(struct.pack("<B", tensors.proj_comp))
        f.write(struct.pack("<3I", *tensors.counts))
        f.write(struct.pack("<I", len(tensors.blocks)))
        for (kind, a, b, c), t in sorted(tensors.blocks.items()):
            f.write(struct.pack("<4B", _KIND_TAGS[kind], a, b, c))
            f.write(struct.pack("<3I", *t.shape))
            f.write(struct.pack("<Q", t.nnz))
            for arr in (t.kk, t.jj, t.ii):
                f.write(arr.astype("<i4").tobytes())
            f.write(t.vals.astype("<f8").tobytes())
        for mats in (tensors.grams, tensors.kstiff):
            for m in mats:
                f.write(struct.pack("<2I", *m.shape))
                f.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_tensors(path, expected_key=None):
    """Read a tensor set; refuses a cache whose key does not match."""
    with open(path, "rb") as f:
        if f.read(8) != _TENSOR_MAGIC:
            raise ValueError("not a tensor cache file")
        (klen,) = struct.unpack("<I", f.read(4))
        key = f.read(klen).decode()
        if expected_key is not None and key != expected_key:
            raise ValueError("tensor cache key mismatch; rebuild the cache")
        (proj_comp,) = struct.unpack("<B", f.read(1))
        counts = list(struct.unpack("<3I", f.read(12)))
        (nblocks,) = struct.unpack("<I", f.read(4))
        blocks = {}
        for _ in range(nblocks):
            kind_tag, a, b, c = struct.unpack("<4B", f.read(4))
            shape = struct.unpack("<3I", f.read(12))
            (nnz,) = struct.unpack("<Q", f.read(8))
            kk = np.frombuffer(f.read(4 * nnz), dtype="<i4")
            jj = np.frombuffer(f.read(4 * nnz), dtype="<i4")
            ii = np.frombuffer(f.read(4 * nnz), dtype="<i4")
            vals = np.frombuffer(f.read(8 * nnz), dtype="<f8")
            blocks[(_KIND_NAMES[kind_tag], a, b, c)] = TensorCOO(
                kk=kk.copy(), jj=jj.copy(), ii=ii.copy(), vals=vals.copy(), shape=shape
            )
        mats = []
        for _ in range(6):
            r, co = struct.unpack("<2I", f.read(8))
            mats.append(np.frombuffer(f.read(8 * r * co), dtype="<f8").reshape(r, co).copy())
    return TripleTensorSet(
        blocks=blocks, grams=mats[:3], kstiff=mats[3:], proj_comp=proj_comp,
        counts=counts, cache_key=key,
    )
