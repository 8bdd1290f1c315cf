"""Exact-recursion engine for the law of the maximal voltage drop.

Walks the feeder from the leaf to the substation, carrying the joint law of
(through-flow S, downstream maximal drop D). One stage does two things:

* convolve along S with the bus load (D unchanged),
* shear: D becomes max(0, D + rho * S), column by column.

The state keeps exact atoms and the two singular lines (D = 0 and the fresh
diagonal D = rho * S) outside the 2D grid, so point-mass feeders and the
zero-drop probability never suffer discretization. All truncation (load
tails, lattice boundary clips, shear overflow) is logged per stage; the
run aborts when the accumulated loss blows past 100x the configured
tolerance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .feeder_model import FeederSpec, LineSegment, LoadDensity
from .mixed_dist import (
    DropDistribution,
    JointLattice,
    JointState,
    MixedDensity1D,
    marginal_drop,
)

__all__ = [
    "DpConfig",
    "DpReport",
    "StageLog",
    "MassLossError",
    "plan_lattice",
    "init_terminal_state",
    "dp_step",
    "run",
    "joint_to_csv",
]

_EMPTY = np.empty(0)


class MassLossError(RuntimeError):
    """Accumulated truncation exceeded 100x the configured tolerance."""


@dataclass(frozen=True)
class DpConfig:
    """Engine knobs.

    grid_s / grid_delta count lattice cells per axis (the S axis may gain a
    couple of cells when its edges snap onto the integer lattice).
    tail_tol is the per-run truncation budget; each stage gets tail_tol / N.
    renormalize scales the final drop law back to total mass one.
    """

    grid_s: int = 2048
    grid_delta: int = 2048
    tail_tol: float = 1e-6
    renormalize: bool = False

    def __post_init__(self):
        if self.grid_s < 16 or self.grid_delta < 16:
            raise ValueError("grids need at least 16 cells per axis")
        if not 0.0 < self.tail_tol <= 1e-2:
            raise ValueError("tail_tol must lie in (0, 1e-2]")


@dataclass(frozen=True)
class StageLog:
    stage: int
    seconds: float
    kernel_tail: float      # mass dropped with the load-support truncation
    boundary_spill: float   # mass clipped at lattice edges and the drop top
    cumulative_lost: float


@dataclass(eq=False)
class DpReport:
    """Everything a run produced: final state, drop law, per-stage audit."""

    state: JointState
    drop: DropDistribution
    lattice: JointLattice
    stage_logs: list[StageLog]
    seconds: float

    @property
    def lost_mass(self) -> float:
        return self.state.lost_mass

    @property
    def ledger_gap(self) -> float:
        """Signed unlogged discrepancy: 1 - final mass - logged losses."""
        return 1.0 - self.state.total_mass() - self.state.lost_mass


# ---------------------------------------------------------------------------
# lattice planning
# ---------------------------------------------------------------------------


def plan_lattice(spec: FeederSpec, config: DpConfig | None = None) -> JointLattice:
    """Size one shared (S, D) lattice for a whole run.

    A coarse convolution sweep over the suffix-sum laws (capped at 2048
    cells, cell width doubling on overflow) yields per-stage quantile
    windows at the stage budget. The S domain is their union, padded and
    snapped so S = 0 is a cell edge; the D top bounds the drop by
    sum_j rho_j * max(0, hi_j), which the recursion cannot exceed outside
    the logged tail events.
    """
    config = config or DpConfig()
    n = spec.n
    budget = config.tail_tol / n
    rho = spec.rho
    sup = [d.support(0.1 * budget) for d in spec.loads]

    scale = max(max(hi - lo for lo, hi in sup),
                max(abs(b) for pair in sup for b in pair), 1e-9)
    h = scale / 256.0
    masses = np.array([1.0])
    origin = 0  # masses[i] sits at (origin + i) * h
    s_lo = np.empty(n)
    s_hi = np.empty(n)
    for j in range(n - 1, -1, -1):
        if spec.loads[j].is_atomic():
            locs = np.array([x for x, _ in spec.loads[j].atoms()])
            ams = np.array([m for _, m in spec.loads[j].atoms()])
        else:
            locs, ams = _fine_law(spec.loads[j], h, 0.1 * budget)
        k0, w = _split_onto(locs / h, ams)
        masses = np.convolve(masses, w)
        origin += k0
        cum = np.cumsum(masses)
        total = cum[-1]
        i_lo = int(np.searchsorted(cum, budget))
        i_hi = int(np.searchsorted(cum, total - budget))
        s_lo[j] = (origin + i_lo - 1) * h - 3.0 * h
        s_hi[j] = (origin + i_hi + 1) * h + 3.0 * h
        # track the moving bulk at constant resolution: trim tails far below
        # the budget (coarsening h instead would freeze the drift of laws
        # whose per-stage mean shift is smaller than a cell)
        t0 = int(np.searchsorted(cum, 1e-3 * budget))
        t1 = max(int(np.searchsorted(cum, total - 1e-3 * budget)) + 1, t0 + 2)
        if t0 > 0 or t1 < len(masses):
            masses = masses[t0:t1]
            origin += t0
        if len(masses) > 16384:
            if origin % 2:
                masses = np.concatenate(([0.0], masses))
                origin -= 1
            if len(masses) % 2:
                masses = np.concatenate((masses, [0.0]))
            masses = masses[0::2] + masses[1::2]
            origin //= 2
            h *= 2.0

    g_lo = min(0.0, float(s_lo.min()))
    g_hi = max(0.0, float(s_hi.max()))
    if g_hi - g_lo < 1e-9 * max(1.0, abs(g_lo), abs(g_hi)):
        pad = max(0.5, 1e-6 * max(abs(g_lo), abs(g_hi)))
        g_lo -= pad
        g_hi += pad
    # Two-point splits diffuse mass by at most one cell per stage, so after
    # n stages the lattice law runs wider than the true law by O(h sqrt(n)).
    # Reserve a 3 sqrt(n)-cell margin per exposed edge (Hoeffding: crossing
    # mass <= 2 exp(-18)); the drop axis only needs it at the top, the zero
    # clamp absorbs at the bottom.
    m_s = min(math.ceil(3.0 * math.sqrt(n)), config.grid_s // 3)
    m_d = min(math.ceil(3.0 * math.sqrt(n)), config.grid_delta // 3)
    h_s = (g_hi - g_lo) / max(config.grid_s - 2 * m_s, 1)
    s_base = math.floor(g_lo / h_s) - 1 - m_s
    s_cells = (math.ceil(g_hi / h_s) + 1 + m_s) - s_base

    d_max = float(np.dot(rho, np.maximum(s_hi, 0.0)))
    d_max = d_max * 1.001 + 1e-12
    return JointLattice(
        s_base=s_base,
        s_step=h_s,
        s_cells=int(s_cells),
        d_step=d_max / max(config.grid_delta - m_d, 1),
        d_cells=config.grid_delta,
        stage_tail_budget=budget,
    )


def init_terminal_state(spec: FeederSpec, config: DpConfig | None = None) -> JointState:
    """Plan the lattice and place the exact (S, D) = (0, 0) starting mass."""
    return JointState.terminal(plan_lattice(spec, config), stage=spec.n)


# ---------------------------------------------------------------------------
# stage kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Kernel:
    """One bus load, prepared for lattice work.

    Continuous mass becomes weights at edge offsets k * h (k0 <= k <= k1),
    so grid (cell-center) values convolved with them land back on centers.
    Point masses stay exact shifts.
    """

    k0: int
    weights: np.ndarray | None
    atom_locs: np.ndarray
    atom_masses: np.ndarray
    tail: float


def _fine_law(load: LoadDensity, h: float, budget: float) -> tuple[np.ndarray, np.ndarray]:
    """Load law as midpoint masses on a grid several times finer than h.

    Exact cdf differences per fine cell; downstream two-point splits then
    place each fine mass mean-exactly, so a kernel never loses its drift
    even when the lattice cell dwarfs the load scale.
    """
    lo, hi = load.support(budget)
    span = max(hi - lo, 1e-12 * max(abs(lo), abs(hi), 1.0))
    cells = int(min(max(4096, 4.0 * math.ceil(span / h)), 65536))
    edges = np.linspace(lo, lo + span, cells + 1)
    m = np.diff(np.asarray(load.cdf(edges), dtype=float))
    return 0.5 * (edges[:-1] + edges[1:]), np.clip(m, 0.0, None)


def _split_onto(positions: np.ndarray, masses: np.ndarray) -> tuple[int, np.ndarray]:
    """Deposit masses at real-valued indices with the two-point linear split.

    Returns (first index, weight array); the split keeps the first moment
    of every deposit exact.
    """
    base = np.floor(positions).astype(int)
    frac = positions - base
    k0 = int(base.min())
    w = np.zeros(int(base.max()) - k0 + 2)
    np.add.at(w, base - k0, masses * (1.0 - frac))
    np.add.at(w, base - k0 + 1, masses * frac)
    return k0, w


def _build_kernel(load: LoadDensity, h: float, budget: float) -> _Kernel:
    if load.is_atomic():
        pairs = load.atoms()
        return _Kernel(0, None,
                       np.array([x for x, _ in pairs]),
                       np.array([m for _, m in pairs]), 0.0)
    mid, masses = _fine_law(load, h, budget)
    k0, w = _split_onto(mid / h, masses)
    return _Kernel(k0, w, _EMPTY, _EMPTY, max(0.0, 1.0 - float(masses.sum())))


# ---------------------------------------------------------------------------
# array helpers (value-sum spills; callers convert to mass)
# ---------------------------------------------------------------------------


def _fold_last(dest: np.ndarray, src: np.ndarray, k0: int) -> float:
    """dest[..., t + k0] += src[..., t]; returns the out-of-range value sum."""
    n = dest.shape[-1]
    width = src.shape[-1]
    lo = max(0, -k0)
    hi = min(width, n - k0)
    if hi <= lo:
        return float(src.sum())
    dest[..., k0 + lo:k0 + hi] += src[..., lo:hi]
    return float(src[..., :lo].sum() + src[..., hi:].sum())


def _shift_last(dest: np.ndarray, src: np.ndarray, cells: float, weight: float) -> float:
    """dest += weight * (src shifted by a real number of cells), split over
    the two straddled integer shifts. Returns the clipped value sum."""
    base = math.floor(cells)
    frac = cells - base
    n = src.shape[-1]
    spill = 0.0
    for w, sh in ((1.0 - frac, base), (frac, base + 1)):
        if w <= 0.0:
            continue
        ln = n - abs(sh)
        if ln <= 0:
            spill += w * weight * float(src.sum())
            continue
        d0 = max(0, sh)
        s0 = max(0, -sh)
        dest[..., d0:d0 + ln] += (w * weight) * src[..., s0:s0 + ln]
        spill += w * weight * (float(src.sum()) - float(src[..., s0:s0 + ln].sum()))
    return spill


def _conv1(vals: np.ndarray, w: np.ndarray) -> np.ndarray:
    if len(vals) + len(w) - 1 < 4096:
        return np.convolve(vals, w)
    out = fftconvolve(vals, w)
    np.clip(out, 0.0, None, out=out)
    return out


def _analytic_cells(load: LoadDensity, shift: float, mass: float,
                    lat: JointLattice) -> tuple[np.ndarray, float]:
    """Cell masses of (atom at shift) + load, evaluated from the fine law.

    Splitting the fine cdf-difference masses keeps an atom's convolution
    free of the half-cell smear a gridded shift would add, and keeps the
    deposit's mean exact. Returns (cell masses, mass outside the lattice).
    """
    mid, fm = _fine_law(load, lat.s_step, lat.stage_tail_budget)
    u = (mid + shift - lat.s_lo) / lat.s_step - 0.5
    base = np.floor(u).astype(int)
    frac = u - base
    vals = np.zeros(lat.s_cells)
    for b, w in ((base, fm * (1.0 - frac)), (base + 1, fm * frac)):
        ok = (b >= 0) & (b < lat.s_cells)
        np.add.at(vals, b[ok], w[ok])
    vals *= mass
    return vals, mass - float(vals.sum())


def _row_split(d: float, lat: JointLattice) -> tuple[int, float]:
    """Integer row and fractional carry for a drop value (row < 0 clamps to 0)."""
    g = d / lat.d_step - 0.5
    j = math.floor(g)
    return j, g - j


def _lift_diag(canvas: np.ndarray, line_vals: np.ndarray, slope: float,
               lat: JointLattice) -> float:
    """Splat the diagonal line density onto the 2D canvas at D = slope * S.

    Two-row linear split; rows below 0 clamp to row 0 (drop under half a
    cell), rows above the top are clipped and returned as lost mass.
    """
    mass = line_vals * lat.s_step
    cols = np.nonzero(mass > 0.0)[0]
    if len(cols) == 0:
        return 0.0
    g = slope * lat.s_centers()[cols] / lat.d_step - 0.5
    j0 = np.floor(g).astype(int)
    frac = g - j0
    dens = mass[cols] / (lat.s_step * lat.d_step)
    spill = 0.0
    for w, rows in ((1.0 - frac, j0), (frac, j0 + 1)):
        contrib = w * dens
        rows = np.clip(rows, 0, None)
        over = rows >= lat.d_cells
        if np.any(over):
            spill += float(contrib[over].sum()) * lat.s_step * lat.d_step
        keep = ~over & (contrib > 0.0)
        np.add.at(canvas, (rows[keep], cols[keep]), contrib[keep])
    return spill


def _shear_canvas(canvas: np.ndarray, rho: float,
                  lat: JointLattice) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-column shear D -> D + rho * S with clipping at zero.

    Returns (new canvas, per-column mass clipped to the zero line, mass
    lost over the top). Only negative-S columns can feed the zero line.
    """
    m_d, n_s = canvas.shape
    cell = lat.s_step * lat.d_step
    colsum = canvas.sum(axis=0)
    g = rho * lat.s_centers() / lat.d_step
    base = np.floor(g).astype(int)
    frac = g - base
    out = np.zeros_like(canvas)
    zero_gain = np.zeros(n_s)
    top = 0.0
    for i in np.nonzero(colsum > 0.0)[0]:
        col = canvas[:, i]
        for w, sh in ((1.0 - frac[i], base[i]), (frac[i], base[i] + 1)):
            if w <= 0.0:
                continue
            if sh >= m_d:
                top += w * colsum[i]
            elif sh <= -m_d:
                zero_gain[i] += w * colsum[i]
            elif sh >= 0:
                out[sh:, i] += w * col[:m_d - sh]
                if sh:
                    top += w * float(col[m_d - sh:].sum())
            else:
                out[:m_d + sh, i] += w * col[-sh:]
                zero_gain[i] += w * float(col[:-sh].sum())
    return out, zero_gain * cell, top * cell


# ---------------------------------------------------------------------------
# one stage
# ---------------------------------------------------------------------------


def _apply_stage(state: JointState, load: LoadDensity, segment: LineSegment,
                 config: DpConfig) -> tuple[JointState, float, float]:
    lat = state.lattice
    h_s, h_d = lat.s_step, lat.d_step
    cell = h_s * h_d
    rho = segment.rho
    kernel = _build_kernel(load, h_s, lat.stage_tail_budget)
    centers = lat.s_centers()
    spill = 0.0

    # pre-convolution free atoms: the old ones plus lifted diagonal atoms
    dl = state.diag_line
    pre_s = np.concatenate((state.atom_s, dl.atom_locs))
    pre_d = np.concatenate((state.atom_d, state.slope * dl.atom_locs))
    pre_m = np.concatenate((state.atom_mass, dl.atom_masses))

    diag_grid_mass = dl.grid_mass()
    gridded_in = state.pc_mass() + diag_grid_mass + state.zero_line.grid_mass()
    tail_loss = gridded_in * kernel.tail

    # ---- phase A: convolve along S at fixed D ----
    canvas = None
    base = None
    if state.pc is not None or diag_grid_mass > 0.0:
        base = np.array(state.pc) if state.pc is not None \
            else np.zeros((lat.d_cells, lat.s_cells))
        if dl.grid is not None:
            spill += _lift_diag(base, dl.grid.values, state.slope, lat)
    if base is not None:
        canvas = np.zeros_like(base)
        if kernel.weights is not None:
            full = fftconvolve(base, kernel.weights[np.newaxis, :], axes=1)
            np.clip(full, 0.0, None, out=full)
            spill += _fold_last(canvas, full, kernel.k0) * cell
        for xa, wa in zip(kernel.atom_locs, kernel.atom_masses):
            spill += _shift_last(canvas, base, xa / h_s, wa) * cell

    new_atoms: list[tuple[float, float, float]] = []
    if len(pre_s):
        if kernel.weights is not None:
            # atom (x) continuous load: analytic deposit on the straddled rows
            if canvas is None:
                canvas = np.zeros((lat.d_cells, lat.s_cells))
            for sa, da, ma in zip(pre_s, pre_d, pre_m):
                vals, clipped = _analytic_cells(load, sa, ma, lat)
                spill += clipped
                j, f = _row_split(da, lat)
                for w, row in ((1.0 - f, j), (f, j + 1)):
                    if w <= 0.0:
                        continue
                    if row >= lat.d_cells:
                        spill += w * float(vals.sum())
                        continue
                    canvas[max(row, 0)] += (w / cell) * vals
        else:
            for sa, da, ma in zip(pre_s, pre_d, pre_m):
                for xa, wa in zip(kernel.atom_locs, kernel.atom_masses):
                    new_atoms.append((sa + xa, da, ma * wa))

    # the zero-drop line convolves in 1D
    zl = state.zero_line
    z_vals = np.zeros(lat.s_cells)
    z_atoms: list[tuple[float, float]] = []
    if zl.grid is not None and zl.grid.mass() > 0.0:
        if kernel.weights is not None:
            spill += _fold_last(z_vals, _conv1(zl.grid.values, kernel.weights),
                                kernel.k0) * h_s
        else:
            for xa, wa in zip(kernel.atom_locs, kernel.atom_masses):
                spill += _shift_last(z_vals, zl.grid.values, xa / h_s, wa) * h_s
    for a, m in zip(zl.atom_locs, zl.atom_masses):
        if kernel.weights is not None:
            vals, clipped = _analytic_cells(load, a, m, lat)
            spill += clipped
            z_vals += vals / h_s
        else:
            for xa, wa in zip(kernel.atom_locs, kernel.atom_masses):
                z_atoms.append((a + xa, m * wa))

    # ---- phase B: shear D -> max(0, D + rho * S) ----
    if canvas is not None:
        canvas, zero_gain, top = _shear_canvas(canvas, rho, lat)
        spill += top
        z_vals += zero_gain / h_s

    neg = centers < 0.0
    zero_vals = np.where(neg, z_vals, 0.0)
    diag_vals = np.where(neg, 0.0, z_vals)

    zero_locs, zero_masses = [], []
    diag_locs, diag_masses = [], []
    for a, m in z_atoms:
        if a > 0.0:
            diag_locs.append(a)
            diag_masses.append(m)
        else:
            zero_locs.append(a)
            zero_masses.append(m)
    free_s, free_d, free_m = [], [], []
    for sa, da, ma in new_atoms:
        d2 = da + rho * sa
        if d2 > 0.0:
            free_s.append(sa)
            free_d.append(d2)
            free_m.append(ma)
        else:
            zero_locs.append(sa)
            zero_masses.append(ma)

    if canvas is not None and not canvas.any():
        canvas = None
    new_state = JointState(
        stage=state.stage - 1,
        slope=rho,
        lattice=lat,
        pc=canvas,
        zero_line=MixedDensity1D(
            grid=lat.s_grid(zero_vals) if zero_vals.any() else None,
            atom_locs=np.asarray(zero_locs), atom_masses=np.asarray(zero_masses)),
        diag_line=MixedDensity1D(
            grid=lat.s_grid(diag_vals) if diag_vals.any() else None,
            atom_locs=np.asarray(diag_locs), atom_masses=np.asarray(diag_masses)),
        atom_s=np.asarray(free_s),
        atom_d=np.asarray(free_d),
        atom_mass=np.asarray(free_m),
        lost_mass=state.lost_mass + tail_loss + spill,
    )
    if new_state.lost_mass > 100.0 * config.tail_tol:
        raise MassLossError(
            f"accumulated mass loss {new_state.lost_mass:.3e} exceeds "
            f"100x tail_tol={config.tail_tol:.1e} at stage {new_state.stage}")
    return new_state, tail_loss, spill


def dp_step(state: JointState, load: LoadDensity, segment: LineSegment,
            config: DpConfig | None = None) -> JointState:
    """Advance one bus toward the substation; see the module docstring."""
    new_state, _, _ = _apply_stage(state, load, segment, config or DpConfig())
    return new_state


def run(spec: FeederSpec, config: DpConfig | None = None) -> DpReport:
    """Propagate the full feeder and integrate out the through-flow."""
    config = config or DpConfig()
    t0 = time.perf_counter()
    state = init_terminal_state(spec, config)
    logs: list[StageLog] = []
    for j in range(spec.n - 1, -1, -1):
        t1 = time.perf_counter()
        state, tail_loss, spill = _apply_stage(
            state, spec.loads[j], spec.segments[j], config)
        logs.append(StageLog(
            stage=j,
            seconds=time.perf_counter() - t1,
            kernel_tail=tail_loss,
            boundary_spill=spill,
            cumulative_lost=state.lost_mass,
        ))
    drop = marginal_drop(state)
    if config.renormalize:
        drop = drop.renormalized()
    return DpReport(
        state=state,
        drop=drop,
        lattice=state.lattice,
        stage_logs=logs,
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# joint-state export
# ---------------------------------------------------------------------------


def joint_to_csv(state: JointState, target) -> None:
    """Emit the joint state as part,s,delta,density,atom_mass rows.

    Part "c" rows carry the 2D density, "zero"/"diag" rows the 1D line
    densities (delta derived from the line geometry), "atom" rows exact
    point masses. An empty state writes the header only.
    """
    own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
    fh = open(target, "w", newline="", encoding="utf-8") if own else target
    try:
        fh.write("part,s,delta,density,atom_mass\n")
        lat = state.lattice
        cs = lat.s_centers()
        if state.pc is not None:
            block = np.column_stack((
                np.tile(cs, lat.d_cells),
                np.repeat(lat.d_centers(), lat.s_cells),
                state.pc.ravel(),
            ))
            np.savetxt(fh, block, fmt="c,%.17g,%.17g,%.17g,0")
        zl, dl = state.zero_line, state.diag_line
        if zl.grid is not None:
            np.savetxt(fh, np.column_stack((cs, zl.grid.values)),
                       fmt="zero,%.17g,0,%.17g,0")
        if dl.grid is not None:
            np.savetxt(fh, np.column_stack((cs, state.slope * cs, dl.grid.values)),
                       fmt="diag,%.17g,%.17g,%.17g,0")
        for a, m in zip(zl.atom_locs, zl.atom_masses):
            fh.write(f"zero,{a!r},0.0,0,{m!r}\n")
        for a, m in zip(dl.atom_locs, dl.atom_masses):
            fh.write(f"diag,{a!r},{state.slope * a!r},0,{m!r}\n")
        for sa, da, ma in zip(state.atom_s, state.atom_d, state.atom_mass):
            fh.write(f"atom,{sa!r},{da!r},0,{ma!r}\n")
    finally:
        if own:
            fh.close()
