"""Mixed discrete/continuous densities on uniform grids, and the joint
flow-drop state they assemble into.

The joint law of (through-flow S, downstream maximal drop D) at any stage
splits into four carriers:

* ``pc``        2D density on D > 0 (the genuinely continuous part),
* ``zero_line`` 1D density plus exact atoms on the D = 0 line (zero drop
                requires nonpositive through-flow, so its support is S <= 0),
* ``diag_line`` 1D density plus exact atoms on the diagonal D = slope * S
                for S > 0 (mass that had zero drop until the latest segment),
* free atoms    exact point masses off those lines (only point-mass loads
                produce them; they keep degenerate feeders exact).

Grids share one integer-anchored lattice: S cell edges sit at
``(s_base + j) * s_step`` so that S = 0 is exactly a cell edge, which makes
the zero/diagonal split at S = 0 exact. D cell edges sit at ``j * d_step``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .feeder_model import LoadDensity

__all__ = [
    "Grid1D",
    "MixedDensity1D",
    "JointLattice",
    "JointState",
    "DropDistribution",
    "density_to_grid",
    "convolve",
    "resample",
    "marginal_drop",
    "write_density_csv",
]

# Values below this are rejected as real negativity; anything in
# [-_NEG_REJECT, 0) is treated as arithmetic dust and clamped to zero.
_NEG_REJECT = 1e-12
# Direct summation below this output size, transform-based above.
_FFT_THRESHOLD = 4096


# ---------------------------------------------------------------------------
# 1D carriers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Uniform cell-centered density: ``values[i]`` at ``lo + (i+1/2)*step``."""

    lo: float
    hi: float
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 1 or len(vals) < 2:
            raise ValueError("Grid1D needs at least 2 cells")
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.hi > self.lo):
            raise ValueError("Grid1D needs finite hi > lo")
        if not np.all(np.isfinite(vals)):
            raise ValueError("Grid1D values must be finite")
        worst = float(vals.min(initial=0.0))
        if worst < -_NEG_REJECT:
            raise ValueError(f"negative density {worst!r} below the clamping threshold")
        np.clip(vals, 0.0, None, out=vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def cells(self) -> int:
        return len(self.values)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.cells

    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.cells) + 0.5) * self.step

    def edges(self) -> np.ndarray:
        return self.lo + np.arange(self.cells + 1) * self.step

    def mass(self) -> float:
        return float(self.values.sum() * self.step)


def _merge_atoms(locs, masses, tol: float):
    locs = np.asarray(locs, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if locs.shape != masses.shape or locs.ndim != 1:
        raise ValueError("atom locations and masses must be matching 1D arrays")
    if len(locs) == 0:
        return locs, masses
    if not (np.all(np.isfinite(locs)) and np.all(np.isfinite(masses))):
        raise ValueError("atoms must be finite")
    if float(masses.min()) < 0.0:
        raise ValueError("atom masses must be nonnegative")
    keep = masses > 0.0
    locs, masses = locs[keep], masses[keep]
    if len(locs) == 0:
        return locs, masses
    order = np.argsort(locs, kind="stable")
    locs, masses = locs[order], masses[order]
    out_loc: list[float] = []
    out_mass: list[float] = []
    for x, m in zip(locs, masses):
        if out_loc and x - out_loc[-1] <= tol:
            total = out_mass[-1] + m
            # mass-weighted location keeps the mean exact under merging
            out_loc[-1] = (out_loc[-1] * out_mass[-1] + x * m) / total
            out_mass[-1] = total
        else:
            out_loc.append(x)
            out_mass.append(m)
    return np.asarray(out_loc), np.asarray(out_mass)


@dataclass(frozen=True, eq=False)
class MixedDensity1D:
    """Optional continuous grid plus exact atoms.

    Atoms closer than half a cell are merged on construction (weighted by
    mass); ``tail_mass`` records what a truncation dropped so the books
    stay auditable. Total mass may not exceed 1 + 1e-6.
    """

    grid: Grid1D | None = None
    atom_locs: np.ndarray = field(default_factory=lambda: np.empty(0))
    atom_masses: np.ndarray = field(default_factory=lambda: np.empty(0))
    tail_mass: float = 0.0

    def __post_init__(self):
        tol = 0.5 * self.grid.step if self.grid is not None else 0.0
        locs, masses = _merge_atoms(self.atom_locs, self.atom_masses, tol)
        locs.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "atom_locs", locs)
        object.__setattr__(self, "atom_masses", masses)
        if self.tail_mass < 0.0:
            raise ValueError("tail_mass must be nonnegative")
        total = self.total_mass()
        if total > 1.0 + 1e-6:
            raise ValueError(f"total mass {total!r} exceeds 1 beyond tolerance")

    @classmethod
    def empty(cls) -> "MixedDensity1D":
        return cls()

    def grid_mass(self) -> float:
        return self.grid.mass() if self.grid is not None else 0.0

    def atom_mass(self) -> float:
        return float(self.atom_masses.sum())

    def total_mass(self) -> float:
        return self.grid_mass() + self.atom_mass()

    def n_atoms(self) -> int:
        return len(self.atom_locs)


def density_to_grid(density: LoadDensity, domain: tuple[float, float],
                    cells: int, max_tail: float = 1e-4) -> MixedDensity1D:
    """Grid a load density over ``domain`` with ``cells`` cells.

    Point masses stay exact atoms. Continuous families are sampled at cell
    centers and renormalized to the analytic in-domain mass, so truncation
    never loses mass silently; the dropped tail is recorded on the result.
    Raises ValueError when the domain misses more than ``max_tail`` mass.
    """
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise ValueError("domain must have hi > lo")
    if cells < 2:
        raise ValueError("need at least 2 cells")
    if density.is_atomic():
        atoms = density.atoms()
        inside = [(x, m) for x, m in atoms if lo <= x <= hi]
        tail = 1.0 - sum(m for _, m in inside)
        if tail > max_tail:
            raise ValueError(f"domain {domain} misses {tail!r} of the mass")
        return MixedDensity1D(
            atom_locs=np.array([x for x, _ in inside]),
            atom_masses=np.array([m for _, m in inside]),
            tail_mass=tail,
        )
    in_mass = density.mass_between(lo, hi)
    tail = max(0.0, 1.0 - in_mass)
    if tail > max_tail:
        raise ValueError(f"domain {domain} misses {tail!r} of the mass")
    step = (hi - lo) / cells
    centers = lo + (np.arange(cells) + 0.5) * step
    values = np.asarray(density.pdf(centers), dtype=float)
    raw = float(values.sum() * step)
    if raw <= 0.0:
        raise ValueError("density vanishes on the whole domain")
    values = values * (in_mass / raw)
    return MixedDensity1D(grid=Grid1D(lo, hi, values), tail_mass=tail)


def resample(grid: Grid1D, step: float) -> Grid1D:
    """Conservative rebinning to a new cell width (mass preserved exactly)."""
    if step <= 0:
        raise ValueError("step must be > 0")
    cells = max(2, math.ceil((grid.hi - grid.lo) / step - 1e-9))
    new_edges = grid.lo + np.arange(cells + 1) * step
    cum = np.concatenate(([0.0], np.cumsum(grid.values) * grid.step))
    new_cum = np.interp(new_edges, grid.edges(), cum)
    return Grid1D(grid.lo, grid.lo + cells * step, np.diff(new_cum) / step)


def convolve(a: Grid1D, b: Grid1D) -> Grid1D:
    """Density of the sum of independent variables gridded on equal steps.

    Unequal steps resample ``b`` onto ``a``'s. Direct summation below
    4096 output cells, FFT above; either way the output mass equals the
    product of the input masses up to roundoff.
    """
    if abs(a.step - b.step) > 1e-9 * max(a.step, b.step):
        b = resample(b, a.step)
    step = a.step
    n_out = a.cells + b.cells - 1
    if n_out < _FFT_THRESHOLD:
        vals = np.convolve(a.values, b.values) * step
    else:
        vals = fftconvolve(a.values, b.values) * step
        np.clip(vals, 0.0, None, out=vals)  # transform dust
    lo = a.lo + b.lo + 0.5 * step
    return Grid1D(lo, lo + n_out * step, vals)


# ---------------------------------------------------------------------------
# joint state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointLattice:
    """Shared integer-anchored lattice for one DP run.

    S edges at ``(s_base + j) * s_step`` for j = 0..s_cells (so S = 0 is an
    edge whenever s_base <= 0 <= s_base + s_cells), D edges at ``j * d_step``.
    ``stage_tail_budget`` records the per-stage truncation tolerance the
    domain was sized for.
    """

    s_base: int
    s_step: float
    s_cells: int
    d_step: float
    d_cells: int
    stage_tail_budget: float = 1e-6

    def __post_init__(self):
        if self.s_step <= 0 or self.d_step <= 0:
            raise ValueError("lattice steps must be > 0")
        if self.s_cells < 2 or self.d_cells < 2:
            raise ValueError("lattice needs at least 2 cells per axis")

    @property
    def s_lo(self) -> float:
        return self.s_base * self.s_step

    @property
    def s_hi(self) -> float:
        return (self.s_base + self.s_cells) * self.s_step

    @property
    def d_hi(self) -> float:
        return self.d_cells * self.d_step

    def s_centers(self) -> np.ndarray:
        return (self.s_base + np.arange(self.s_cells) + 0.5) * self.s_step

    def d_centers(self) -> np.ndarray:
        return (np.arange(self.d_cells) + 0.5) * self.d_step

    def s_grid(self, values: np.ndarray) -> Grid1D:
        return Grid1D(self.s_lo, self.s_hi, values)

    def d_grid(self, values: np.ndarray) -> Grid1D:
        return Grid1D(0.0, self.d_hi, values)


_EMPTY = np.empty(0)


@dataclass(frozen=True, eq=False)
class JointState:
    """Joint law of (through-flow, downstream maximal drop) at one stage.

    ``pc`` is the 2D density with shape (d_cells, s_cells), or None while no
    continuous 2D mass exists. ``slope`` is the diagonal's D/S ratio, i.e.
    the drop coefficient of the most recently applied segment. ``lost_mass``
    accumulates all logged truncation over the run so far.
    """

    stage: int
    slope: float
    lattice: JointLattice
    pc: np.ndarray | None = None
    zero_line: MixedDensity1D = field(default_factory=MixedDensity1D)
    diag_line: MixedDensity1D = field(default_factory=MixedDensity1D)
    atom_s: np.ndarray = field(default_factory=lambda: _EMPTY)
    atom_d: np.ndarray = field(default_factory=lambda: _EMPTY)
    atom_mass: np.ndarray = field(default_factory=lambda: _EMPTY)
    lost_mass: float = 0.0

    def __post_init__(self):
        if self.pc is not None:
            if self.pc.shape != (self.lattice.d_cells, self.lattice.s_cells):
                raise ValueError("pc shape does not match the lattice")
        for arr in (self.atom_s, self.atom_d, self.atom_mass):
            if len(arr) != len(self.atom_s):
                raise ValueError("free-atom arrays must have equal length")

    @classmethod
    def terminal(cls, lattice: JointLattice, stage: int) -> "JointState":
        """Exact double point mass at (S, D) = (0, 0): nothing downstream."""
        line = MixedDensity1D(atom_locs=np.array([0.0]), atom_masses=np.array([1.0]))
        return cls(stage=stage, slope=0.0, lattice=lattice, zero_line=line)

    def pc_mass(self) -> float:
        if self.pc is None:
            return 0.0
        return float(self.pc.sum()) * self.lattice.s_step * self.lattice.d_step

    def free_atom_mass(self) -> float:
        return float(self.atom_mass.sum())

    def total_mass(self) -> float:
        return (self.pc_mass() + self.zero_line.total_mass()
                + self.diag_line.total_mass() + self.free_atom_mass())

    def validate(self, mass_tol: float = 1e-4) -> None:
        """Check support invariants and the mass ledger; raises on violation."""
        lat = self.lattice
        centers = lat.s_centers()
        zl, dl = self.zero_line, self.diag_line
        if zl.grid is not None and np.any(zl.grid.values[centers > 0.0] != 0.0):
            raise ValueError("zero-drop line carries mass at positive through-flow")
        if len(zl.atom_locs) and float(zl.atom_locs.max()) > 1e-12:
            raise ValueError("zero-drop atoms must sit at S <= 0")
        if dl.grid is not None and np.any(dl.grid.values[centers < 0.0] != 0.0):
            raise ValueError("diagonal line carries mass at negative through-flow")
        if len(dl.atom_locs) and float(dl.atom_locs.min()) <= 0.0:
            raise ValueError("diagonal atoms must sit at S > 0")
        if len(self.atom_d) and float(self.atom_d.min()) <= 0.0:
            raise ValueError("free atoms must sit at D > 0")
        gap = abs(self.total_mass() + self.lost_mass - 1.0)
        if gap > mass_tol:
            raise ValueError(f"mass ledger off by {gap!r}")


def marginal_drop(state: JointState) -> DropDistribution:
    """Integrate the through-flow out of a stage state.

    The zero line collapses into the atom at D = 0; the diagonal maps cell
    by cell through D = slope * S (conservative rebinning onto the D grid,
    exact for the piecewise-constant line density); diagonal and free atoms
    stay exact atoms.
    """
    lat = state.lattice
    vals = np.zeros(lat.d_cells)
    if state.pc is not None:
        vals += state.pc.sum(axis=1) * lat.s_step

    dl = state.diag_line
    if dl.grid is not None and state.slope > 0.0:
        src_edges = state.slope * dl.grid.edges()
        cum = np.concatenate(([0.0], np.cumsum(dl.grid.values) * dl.grid.step))
        d_edges = np.arange(lat.d_cells + 1) * lat.d_step
        # clamp into [first, last] source edge; outside mass would have been
        # clipped during the shear already
        new_cum = np.interp(d_edges, src_edges, cum)
        vals += np.diff(new_cum) / lat.d_step
        top = float(cum[-1] - new_cum[-1])
        if top > 0.0:
            vals[-1] += top / lat.d_step  # guard: keep any top remainder

    locs = [np.array([0.0])]
    masses = [np.array([state.zero_line.total_mass()])]
    if len(dl.atom_locs):
        locs.append(state.slope * dl.atom_locs)
        masses.append(dl.atom_masses)
    if len(state.atom_d):
        locs.append(state.atom_d)
        masses.append(state.atom_mass)
    density = MixedDensity1D(
        grid=lat.d_grid(vals),
        atom_locs=np.concatenate(locs),
        atom_masses=np.concatenate(masses),
        tail_mass=state.lost_mass,
    )
    return DropDistribution(density)


# ---------------------------------------------------------------------------
# final drop law
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DropDistribution:
    """Law of the maximal voltage drop: atom(s) plus a continuous density.

    Queries treat cell mass as uniform within its cell, so the CDF is
    piecewise linear between grid edges with jumps at atoms. With the
    default report-only normalization the total mass may fall short of one
    by the logged truncation; queries work on the raw masses.
    """

    density: MixedDensity1D

    def total_mass(self) -> float:
        return self.density.total_mass()

    def atom_at_zero(self) -> float:
        """Mass of the exact-zero drop (atoms within half a cell of zero)."""
        d = self.density
        tol = 0.5 * d.grid.step if d.grid is not None else 0.0
        if not len(d.atom_locs):
            return 0.0
        return float(d.atom_masses[np.abs(d.atom_locs) <= tol].sum())

    def _grid_cum(self):
        g = self.density.grid
        if g is None:
            return np.array([0.0, 0.0]), np.array([0.0, 0.0])
        return g.edges(), np.concatenate(([0.0], np.cumsum(g.values) * g.step))

    def cdf(self, x):
        """P(D <= x), right-continuous, vectorized."""
        x = np.asarray(x, dtype=float)
        edges, cum = self._grid_cum()
        out = np.interp(x, edges, cum)
        d = self.density
        if len(d.atom_locs):
            idx = np.searchsorted(d.atom_locs, x, side="right")
            out = out + np.concatenate(([0.0], np.cumsum(d.atom_masses)))[idx]
        return out if out.ndim else float(out)

    def cdf_left(self, x):
        """P(D < x): the left limit of the CDF."""
        x = np.asarray(x, dtype=float)
        edges, cum = self._grid_cum()
        out = np.interp(x, edges, cum)
        d = self.density
        if len(d.atom_locs):
            idx = np.searchsorted(d.atom_locs, x, side="left")
            out = out + np.concatenate(([0.0], np.cumsum(d.atom_masses)))[idx]
        return out if out.ndim else float(out)

    def prob_exceed(self, x) -> float:
        """P(D > x) under the raw (possibly sub-unit) mass."""
        return float(self.total_mass() - self.cdf(x))

    def knots(self) -> np.ndarray:
        """Points where the CDF changes character; enough for sup-distance scans."""
        edges, _ = self._grid_cum()
        return np.unique(np.concatenate((edges, self.density.atom_locs)))

    def quantile(self, p: float) -> float:
        """Generalized inverse CDF. p above the total mass clamps to the top."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"quantile level {p!r} outside [0, 1]")
        xs = self.knots()
        f_right = np.asarray(self.cdf(xs))
        f_left = np.asarray(self.cdf_left(xs))
        i = int(np.searchsorted(f_right, p, side="left"))
        if i >= len(xs):
            return float(xs[-1])
        if i == 0:
            return float(xs[0])
        if f_left[i] >= p:
            base = f_right[i - 1]
            span = f_left[i] - base
            if span <= 0.0:
                return float(xs[i - 1])
            frac = (p - base) / span
            return float(xs[i - 1] + frac * (xs[i] - xs[i - 1]))
        return float(xs[i])

    def mean_std(self) -> tuple[float, float]:
        """Mean and std of the raw mass (uniform-within-cell second moment)."""
        d = self.density
        mean = 0.0
        second = 0.0
        if d.grid is not None:
            c = d.grid.centers()
            m = d.grid.values * d.grid.step
            mean += float(np.dot(m, c))
            second += float(np.dot(m, c**2) + m.sum() * d.grid.step**2 / 12.0)
        if len(d.atom_locs):
            mean += float(np.dot(d.atom_masses, d.atom_locs))
            second += float(np.dot(d.atom_masses, d.atom_locs**2))
        return mean, math.sqrt(max(second - mean**2, 0.0))

    def renormalized(self) -> "DropDistribution":
        """Scale the raw masses up to total one (explicit opt-in policy)."""
        total = self.total_mass()
        if total <= 0.0:
            raise ValueError("cannot renormalize an empty distribution")
        d = self.density
        grid = None
        if d.grid is not None:
            grid = Grid1D(d.grid.lo, d.grid.hi, d.grid.values / total)
        return DropDistribution(MixedDensity1D(
            grid=grid,
            atom_locs=d.atom_locs.copy(),
            atom_masses=d.atom_masses / total,
            tail_mass=0.0,
        ))


def write_density_csv(target, obj) -> None:
    """Emit a MixedDensity1D or DropDistribution as x,density,atom_mass rows."""
    density = obj.density if isinstance(obj, DropDistribution) else obj
    own = isinstance(target, (str, bytes)) or hasattr(target, "__fspath__")
    fh = open(target, "w", newline="", encoding="utf-8") if own else target
    try:
        writer = csv.writer(fh)
        writer.writerow(["x", "density", "atom_mass"])
        if density.grid is not None:
            for x, v in zip(density.grid.centers(), density.grid.values):
                writer.writerow([repr(float(x)), repr(float(v)), "0"])
        for x, m in zip(density.atom_locs, density.atom_masses):
            writer.writerow([repr(float(x)), "0", repr(float(m))])
    finally:
        if own:
            fh.close()
