"""Feeder description: line segments, per-bus load densities, config parsing.

A feeder is a single radial chain. Bus 0 is the substation held at
``base_voltage``; buses 1..N carry stochastic loads. Segment k (0-based)
connects bus k to bus k+1 and its voltage-drop coefficient is
``rho = r / base_voltage`` in p.u. per kW of through-flow. Loads are
*combined* demands s = p + alpha*q in kW, with one homogeneous x/r ratio
``alpha`` for the whole feeder.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "FeederConfigError",
    "LineSegment",
    "LoadDensity",
    "TwoSidedExponential",
    "PointMass",
    "Uniform",
    "Gaussian",
    "Histogram",
    "FeederSpec",
    "load_moments",
    "density_from_dict",
    "parse_feeder",
    "feeder_from_dict",
    "feeder_to_dict",
    "write_feeder",
]

# Normalization slack for "integrates to one" checks.
_NORM_TOL = 1e-9
# Relative slack when checking x/r against the feeder-level alpha.
_ALPHA_TOL = 1e-9


class FeederConfigError(ValueError):
    """Invalid feeder configuration. ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise FeederConfigError(path, message)


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FeederConfigError(path, f"expected a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise FeederConfigError(path, "must be finite")
    return v


# ---------------------------------------------------------------------------
# load densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoadDensity:
    """Base class for one bus's combined-demand density (kW).

    Subclasses implement vectorized pdf/cdf/ppf, exact moments, a
    tail-truncated support window and dilation. ``atoms()`` lists exact
    point-mass components; purely continuous families return none.
    """

    family = ""

    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def ppf(self, u):
        """Inverse CDF, defined for u in (0, 1)."""
        raise NotImplementedError

    def moments(self) -> tuple[float, float]:
        """Exact (mean, std)."""
        raise NotImplementedError

    def support(self, tail: float) -> tuple[float, float]:
        """Window carrying all but at most ``tail`` of the mass."""
        raise NotImplementedError

    def scaled(self, v: float) -> "LoadDensity":
        """Density of v*s (pure dilation). v = 0 collapses to a point at 0."""
        raise NotImplementedError

    def atoms(self) -> list[tuple[float, float]]:
        return []

    def is_atomic(self) -> bool:
        return False

    def mass_between(self, lo: float, hi: float) -> float:
        return float(self.cdf(hi) - self.cdf(lo))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class TwoSidedExponential(LoadDensity):
    """Density c*exp(-s/rate_pos) for s > 0, c*exp(rate_neg*s) for s <= 0.

    The positive lobe models consumption, the negative lobe injection
    (distributed generation). Normalization requires
    weight * (rate_pos + 1/rate_neg) = 1; note rate_pos enters as a scale
    and rate_neg as a rate, mirroring how the two lobes are usually quoted.
    """

    weight: float
    rate_pos: float
    rate_neg: float

    family = "two-sided-exponential"

    def __post_init__(self):
        _require(self.weight > 0, "weight", "must be > 0")
        _require(self.rate_pos > 0, "rate_pos", "must be > 0")
        _require(self.rate_neg > 0, "rate_neg", "must be > 0")
        total = self.weight * (self.rate_pos + 1.0 / self.rate_neg)
        _require(
            abs(total - 1.0) <= _NORM_TOL,
            "weight",
            f"density integrates to {total!r}, not 1",
        )

    @property
    def neg_mass(self) -> float:
        # P(s <= 0) = c / rate_neg
        return self.weight / self.rate_neg

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        pos = self.weight * np.exp(-np.maximum(x, 0.0) / self.rate_pos)
        neg = self.weight * np.exp(np.minimum(x, 0.0) * self.rate_neg)
        return np.where(x > 0.0, pos, neg)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        neg = self.weight / self.rate_neg * np.exp(np.minimum(x, 0.0) * self.rate_neg)
        pos = 1.0 - self.weight * self.rate_pos * np.exp(-np.maximum(x, 0.0) / self.rate_pos)
        return np.where(x <= 0.0, neg, pos)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        flat = np.atleast_1d(u)
        out = np.empty_like(flat)
        below = flat <= self.neg_mass
        # invert c/l- * exp(l- s) = u on the injection side
        out[below] = np.log(flat[below] * self.rate_neg / self.weight) / self.rate_neg
        # invert 1 - c*l+ * exp(-s/l+) = u on the consumption side
        rest = ~below
        out[rest] = -self.rate_pos * np.log((1.0 - flat[rest]) / (self.weight * self.rate_pos))
        return out.reshape(u.shape)

    def moments(self):
        c, lp, ln = self.weight, self.rate_pos, self.rate_neg
        mean = c * (lp**2 - 1.0 / ln**2)
        second = 2.0 * c * (lp**3 + 1.0 / ln**3)
        return mean, math.sqrt(second - mean**2)

    def support(self, tail):
        half = tail / 2.0
        lo = math.log(half * self.rate_neg / self.weight) / self.rate_neg
        hi = -self.rate_pos * math.log(half / (self.weight * self.rate_pos))
        return min(lo, 0.0), max(hi, 0.0)

    def scaled(self, v):
        if v == 0.0:
            return PointMass(location=0.0)
        _require(v > 0, "scale", "dilation factor must be >= 0")
        return TwoSidedExponential(
            weight=self.weight / v,
            rate_pos=self.rate_pos * v,
            rate_neg=self.rate_neg / v,
        )

    def to_dict(self):
        return {
            "family": self.family,
            "weight": self.weight,
            "rate_pos": self.rate_pos,
            "rate_neg": self.rate_neg,
        }


@dataclass(frozen=True)
class PointMass(LoadDensity):
    """Deterministic demand: all mass at ``location`` (kW, may be negative)."""

    location: float

    family = "point-mass"

    def __post_init__(self):
        _require(math.isfinite(self.location), "location", "must be finite")

    def pdf(self, x):
        # Degenerate family; the density is not a function. Grid consumers
        # must branch on atoms() instead.
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= self.location, 1.0, 0.0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return np.full_like(u, self.location)

    def moments(self):
        return self.location, 0.0

    def support(self, tail):
        return self.location, self.location

    def scaled(self, v):
        return PointMass(location=self.location * v)

    def atoms(self):
        return [(self.location, 1.0)]

    def is_atomic(self):
        return True

    def to_dict(self):
        return {"family": self.family, "location": self.location}


@dataclass(frozen=True)
class Uniform(LoadDensity):
    """Uniform density on [lo, hi]."""

    lo: float
    hi: float

    family = "uniform"

    def __post_init__(self):
        _require(math.isfinite(self.lo) and math.isfinite(self.hi), "lo", "bounds must be finite")
        _require(self.hi > self.lo, "hi", "must exceed lo")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        return np.where(inside, 1.0 / self.width, 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.lo) / self.width, 0.0, 1.0)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return self.lo + u * self.width

    def moments(self):
        return 0.5 * (self.lo + self.hi), self.width / math.sqrt(12.0)

    def support(self, tail):
        return self.lo, self.hi

    def scaled(self, v):
        if v == 0.0:
            return PointMass(location=0.0)
        return Uniform(lo=self.lo * v, hi=self.hi * v)

    def to_dict(self):
        return {"family": self.family, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Gaussian(LoadDensity):
    """Normal density with the given mean and std (kW)."""

    mean: float
    std: float

    family = "gaussian"

    def __post_init__(self):
        _require(math.isfinite(self.mean), "mean", "must be finite")
        _require(self.std > 0 and math.isfinite(self.std), "std", "must be > 0")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.std
        return np.exp(-0.5 * z * z) / (self.std * math.sqrt(2.0 * math.pi))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return ndtr((x - self.mean) / self.std)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        return self.mean + self.std * ndtri(u)

    def moments(self):
        return self.mean, self.std

    def support(self, tail):
        z = float(ndtri(tail / 2.0))  # negative
        return self.mean + self.std * z, self.mean - self.std * z

    def scaled(self, v):
        if v == 0.0:
            return PointMass(location=0.0)
        return Gaussian(mean=self.mean * v, std=self.std * abs(v))

    def to_dict(self):
        return {"family": self.family, "mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class Histogram(LoadDensity):
    """Piecewise-constant density from bin edges and bin masses.

    Edges must increase strictly; masses are nonnegative and sum to one
    within 1e-9. Intended carrier for empirical or externally fitted
    load shapes.
    """

    edges: tuple[float, ...]
    masses: tuple[float, ...]

    family = "histogram"

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(float(e) for e in self.edges))
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        _require(len(self.edges) >= 2, "edges", "need at least two edges")
        _require(
            len(self.masses) == len(self.edges) - 1,
            "masses",
            f"expected {len(self.edges) - 1} masses for {len(self.edges)} edges, got {len(self.masses)}",
        )
        e = np.asarray(self.edges)
        _require(bool(np.all(np.isfinite(e))), "edges", "must be finite")
        _require(bool(np.all(np.diff(e) > 0)), "edges", "must increase strictly")
        m = np.asarray(self.masses)
        _require(bool(np.all(m >= 0.0)), "masses", "must be nonnegative")
        total = float(m.sum())
        _require(abs(total - 1.0) <= _NORM_TOL, "masses", f"sum to {total!r}, not 1")

    def _arrays(self):
        return np.asarray(self.edges), np.asarray(self.masses)

    def pdf(self, x):
        e, m = self._arrays()
        dens = m / np.diff(e)
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(e, x, side="right") - 1
        inside = (x >= e[0]) & (x <= e[-1])
        idx = np.clip(idx, 0, len(m) - 1)
        return np.where(inside, dens[idx], 0.0)

    def cdf(self, x):
        e, m = self._arrays()
        cum = np.concatenate(([0.0], np.cumsum(m)))
        x = np.asarray(x, dtype=float)
        return np.interp(x, e, cum)

    def ppf(self, u):
        e, m = self._arrays()
        cum = np.concatenate(([0.0], np.cumsum(m)))
        cum[-1] = 1.0  # guard cumulative roundoff at the top
        u = np.asarray(u, dtype=float)
        # uniform within the bin that the target mass falls into
        return np.interp(u, cum, e)

    def moments(self):
        e, m = self._arrays()
        centers = 0.5 * (e[:-1] + e[1:])
        widths = np.diff(e)
        mean = float(np.sum(m * centers))
        second = float(np.sum(m * (centers**2 + widths**2 / 12.0)))
        return mean, math.sqrt(max(second - mean**2, 0.0))

    def support(self, tail):
        return self.edges[0], self.edges[-1]

    def scaled(self, v):
        if v == 0.0:
            return PointMass(location=0.0)
        return Histogram(edges=tuple(e * v for e in self.edges), masses=self.masses)

    def to_dict(self):
        return {"family": self.family, "edges": list(self.edges), "masses": list(self.masses)}


_FAMILIES: dict[str, type] = {
    cls.family: cls
    for cls in (TwoSidedExponential, PointMass, Uniform, Gaussian, Histogram)
}

_FAMILY_FIELDS: dict[str, tuple[str, ...]] = {
    "two-sided-exponential": ("weight", "rate_pos", "rate_neg"),
    "point-mass": ("location",),
    "uniform": ("lo", "hi"),
    "gaussian": ("mean", "std"),
    "histogram": ("edges", "masses"),
}


def load_moments(density: LoadDensity) -> tuple[float, float]:
    """Exact (mean, std) of a load density."""
    return density.moments()


def density_from_dict(obj, path: str = "load") -> LoadDensity:
    """Build a LoadDensity from a tagged config mapping."""
    _require(isinstance(obj, dict), path, f"expected an object, got {type(obj).__name__}")
    family = obj.get("family")
    _require(family in _FAMILIES, f"{path}.family",
             f"unknown family {family!r}, expected one of {sorted(_FAMILIES)}")
    fields = _FAMILY_FIELDS[family]
    extra = set(obj) - set(fields) - {"family"}
    _require(not extra, path, f"unexpected fields {sorted(extra)}")
    kwargs = {}
    for name in fields:
        _require(name in obj, f"{path}.{name}", "missing")
        value = obj[name]
        if name in ("edges", "masses"):
            _require(isinstance(value, list), f"{path}.{name}", "expected a list")
            kwargs[name] = tuple(_as_float(v, f"{path}.{name}[{i}]") for i, v in enumerate(value))
        else:
            kwargs[name] = _as_float(value, f"{path}.{name}")
    try:
        return _FAMILIES[family](**kwargs)
    except FeederConfigError as err:
        # re-anchor the field path reported by the dataclass validator
        raise FeederConfigError(f"{path}.{err.path}", str(err).split(": ", 1)[-1]) from None


# ---------------------------------------------------------------------------
# feeder spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LineSegment:
    """One chain link: resistance r, reactance x (ohmic p.u.) and the
    derived drop coefficient rho = r / base_voltage (p.u. per kW)."""

    r: float
    x: float
    rho: float

    def __post_init__(self):
        _require(self.r > 0 and math.isfinite(self.r), "r", "must be > 0")
        _require(self.x >= 0 and math.isfinite(self.x), "x", "must be >= 0")
        _require(self.rho > 0 and math.isfinite(self.rho), "rho", "must be > 0")

    def to_dict(self):
        return {"r": self.r, "x": self.x}


@dataclass(frozen=True)
class FeederSpec:
    """Validated radial feeder: head voltage, x/r ratio, segments, loads."""

    base_voltage: float
    alpha: float
    segments: tuple[LineSegment, ...] = field(default_factory=tuple)
    loads: tuple[LoadDensity, ...] = field(default_factory=tuple)

    def __post_init__(self):
        _require(self.base_voltage > 0 and math.isfinite(self.base_voltage),
                 "base_voltage", "must be > 0")
        _require(self.alpha >= 0 and math.isfinite(self.alpha), "alpha", "must be >= 0")
        _require(len(self.segments) >= 1, "segments", "need at least one segment")
        _require(
            len(self.loads) == len(self.segments),
            "loads",
            f"expected {len(self.segments)} load entries to match segments, got {len(self.loads)}",
        )
        for k, seg in enumerate(self.segments):
            ratio = seg.x / seg.r
            _require(
                abs(ratio - self.alpha) <= _ALPHA_TOL * max(1.0, abs(self.alpha)),
                f"segments[{k}].x",
                f"x/r = {ratio!r} does not match feeder alpha = {self.alpha!r}",
            )

    @property
    def n(self) -> int:
        return len(self.segments)

    @property
    def rho(self) -> np.ndarray:
        return np.array([seg.rho for seg in self.segments])

    def load_means(self) -> np.ndarray:
        return np.array([d.moments()[0] for d in self.loads])


def feeder_from_dict(obj) -> FeederSpec:
    """Build and validate a FeederSpec from a config mapping."""
    _require(isinstance(obj, dict), "", f"expected a JSON object, got {type(obj).__name__}")
    known = {"base_voltage", "alpha", "segments", "loads"}
    extra = set(obj) - known
    _require(not extra, "", f"unexpected fields {sorted(extra)}")
    for name in known:
        _require(name in obj, name, "missing")
    v0 = _as_float(obj["base_voltage"], "base_voltage")
    _require(v0 > 0, "base_voltage", "must be > 0")
    alpha = _as_float(obj["alpha"], "alpha")

    raw_segments = obj["segments"]
    _require(isinstance(raw_segments, list), "segments", "expected a list")
    segments = []
    for k, raw in enumerate(raw_segments):
        path = f"segments[{k}]"
        _require(isinstance(raw, dict), path, "expected an object")
        extra = set(raw) - {"r", "x"}
        _require(not extra, path, f"unexpected fields {sorted(extra)}")
        _require("r" in raw, f"{path}.r", "missing")
        _require("x" in raw, f"{path}.x", "missing")
        r = _as_float(raw["r"], f"{path}.r")
        x = _as_float(raw["x"], f"{path}.x")
        _require(r > 0, f"{path}.r", "must be > 0")
        _require(x >= 0, f"{path}.x", "must be >= 0")
        try:
            segments.append(LineSegment(r=r, x=x, rho=r / v0))
        except FeederConfigError as err:
            raise FeederConfigError(f"{path}.{err.path}", str(err).split(": ", 1)[-1]) from None

    raw_loads = obj["loads"]
    _require(isinstance(raw_loads, list), "loads", "expected a list")
    _require(
        len(raw_loads) == len(segments),
        "loads",
        f"expected {len(segments)} entries to match segments, got {len(raw_loads)}",
    )
    loads = [density_from_dict(raw, f"loads[{k}]") for k, raw in enumerate(raw_loads)]

    return FeederSpec(base_voltage=v0, alpha=alpha,
                      segments=tuple(segments), loads=tuple(loads))


def parse_feeder(path) -> FeederSpec:
    """Read and validate a feeder config JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as err:
        raise FeederConfigError("", f"cannot read {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise FeederConfigError("", f"malformed JSON in {path}: {err}") from None
    return feeder_from_dict(obj)


def feeder_to_dict(spec: FeederSpec) -> dict:
    """Serializable mapping; parse_feeder of the result round-trips."""
    return {
        "base_voltage": spec.base_voltage,
        "alpha": spec.alpha,
        "segments": [seg.to_dict() for seg in spec.segments],
        "loads": [d.to_dict() for d in spec.loads],
    }


def write_feeder(spec: FeederSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(feeder_to_dict(spec), fh, indent=2)
        fh.write("\n")
