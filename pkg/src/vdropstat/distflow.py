"""Deterministic power flow along the chain, linear and nonlinear.

Node 0 is the substation at the base voltage; segment j feeds node j+1,
which carries the combined load ``loads[j]`` (kW). The linearized model
drops the quadratic loss terms, giving the backward flow sum

    S_j = s_j + s_{j+1} + ... + s_{N-1}        (flow through segment j)

and the forward voltage profile V_{j+1} = V_j - rho_j * S_j. The nonlinear
solver keeps the loss terms and exists to quantify the linearization error;
everything statistical downstream is built on the linear model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .feeder_model import FeederSpec

__all__ = [
    "FlowProfile",
    "DropResult",
    "NonConvergenceError",
    "solve_linear",
    "solve_nonlinear",
    "max_drop",
]


class NonConvergenceError(RuntimeError):
    """The backward/forward sweep diverged or ran out of iterations."""


@dataclass(frozen=True)
class FlowProfile:
    """Per-node voltages (length N+1, index 0 = substation) and per-segment
    flows (length N). ``flow_s = flow_p + alpha * flow_q`` is the combined
    flow the drop statistics are built on. The virtual flow beyond the last
    node is identically zero and not stored."""

    voltage: np.ndarray
    flow_p: np.ndarray
    flow_q: np.ndarray
    flow_s: np.ndarray
    iterations: int = 0

    def __post_init__(self):
        n = len(self.flow_s)
        if len(self.voltage) != n + 1 or len(self.flow_p) != n or len(self.flow_q) != n:
            raise ValueError("inconsistent array lengths in FlowProfile")


@dataclass(frozen=True)
class DropResult:
    """Maximal downstream voltage drop. ``delta[k]`` is the drop seen at
    node k looking toward the end of the feeder (length N+1, so delta[0]
    is the feeder-head value and delta[N] is zero by construction)."""

    delta: np.ndarray
    delta0: float
    argmin_bus: int


def _combined_loads(spec: FeederSpec, loads) -> np.ndarray:
    s = np.asarray(loads, dtype=float)
    if s.shape != (spec.n,):
        raise ValueError(f"expected {spec.n} load values, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("loads must be finite")
    return s


def _split_pq(spec: FeederSpec, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Combined demand s = p + alpha*q with q/p = alpha (load power factor
    # matching the homogeneous line x/r), hence p = s/(1+alpha^2).
    p = s / (1.0 + spec.alpha**2)
    return p, spec.alpha * p


def solve_linear(spec: FeederSpec, loads) -> FlowProfile:
    """Lossless linearized profile for one realized load vector (kW)."""
    s = _combined_loads(spec, loads)
    flow_s = np.cumsum(s[::-1])[::-1]
    rho = spec.rho
    voltage = np.empty(spec.n + 1)
    voltage[0] = spec.base_voltage
    voltage[1:] = spec.base_voltage - np.cumsum(rho * flow_s)
    p, q = _split_pq(spec, s)
    return FlowProfile(
        voltage=voltage,
        flow_p=np.cumsum(p[::-1])[::-1],
        flow_q=np.cumsum(q[::-1])[::-1],
        flow_s=flow_s,
    )


def solve_nonlinear(spec: FeederSpec, loads, tol: float = 1e-10,
                    max_iter: int = 100) -> FlowProfile:
    """Backward/forward sweep with quadratic loss terms.

    Backward pass rebuilds segment flows from the end using the previous
    iterate's voltages in the loss terms; the forward pass updates squared
    voltages from the substation. Stops when the largest voltage change
    falls below ``tol``. Raises NonConvergenceError when a squared voltage
    goes nonpositive (physical collapse) or the iteration cap is hit.
    """
    s = _combined_loads(spec, loads)
    p_load, q_load = _split_pq(spec, s)
    n = spec.n
    r = np.array([seg.r for seg in spec.segments])
    x = np.array([seg.x for seg in spec.segments])

    voltage = np.full(n + 1, spec.base_voltage)
    flow_p = np.cumsum(p_load[::-1])[::-1]
    flow_q = np.cumsum(q_load[::-1])[::-1]

    for iteration in range(1, max_iter + 1):
        sq = flow_p**2 + flow_q**2
        vsq_send = voltage[:-1] ** 2
        loss_p = r * sq / vsq_send
        loss_q = x * sq / vsq_send

        # Balance at the receiving node: P_j = loss_j + p_{j+1} + P_{j+1},
        # so each segment's flow carries its own loss.
        new_p = np.cumsum((p_load + loss_p)[::-1])[::-1]
        new_q = np.cumsum((q_load + loss_q)[::-1])[::-1]

        new_voltage = np.empty(n + 1)
        new_voltage[0] = spec.base_voltage
        for j in range(n):
            vsq = new_voltage[j] ** 2
            vv = (vsq
                  - 2.0 * (r[j] * new_p[j] + x[j] * new_q[j])
                  + (r[j]**2 + x[j]**2) * (new_p[j]**2 + new_q[j]**2) / vsq)
            if not (vv > 0.0) or not math.isfinite(vv):
                raise NonConvergenceError(
                    f"voltage collapse at node {j + 1} (V^2 = {vv!r})")
            new_voltage[j + 1] = math.sqrt(vv)

        change = float(np.max(np.abs(new_voltage - voltage)))
        voltage, flow_p, flow_q = new_voltage, new_p, new_q
        if change < tol:
            return FlowProfile(
                voltage=voltage,
                flow_p=flow_p,
                flow_q=flow_q,
                flow_s=flow_p + spec.alpha * flow_q,
                iterations=iteration,
            )

    raise NonConvergenceError(f"no convergence in {max_iter} iterations")


def _batch_delta0(rho: np.ndarray, loads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized drop recursion over rows of a (samples, N) load matrix.

    Returns (delta0, head_flow). Kept as the single implementation of the
    recursion so sampled replays match max_drop exactly.
    """
    flow = np.cumsum(loads[:, ::-1], axis=1)[:, ::-1]
    delta = np.zeros(loads.shape[0])
    for k in range(loads.shape[1] - 1, -1, -1):
        delta = np.maximum(0.0, delta + rho[k] * flow[:, k])
    return delta, flow[:, 0]


def max_drop(spec: FeederSpec, loads) -> DropResult:
    """Maximal drop Delta_0 = V_0 - min_k V_k via the backward recursion.

    delta[k] accumulates max(0, delta[k+1] + rho_k * S_k) from the feeder
    end; the head value equals the profile drop identically (the recursion
    is an algebraic rewrite of the running minimum).
    """
    s = _combined_loads(spec, loads)
    rho = spec.rho
    flow = np.cumsum(s[::-1])[::-1]
    delta = np.zeros(spec.n + 1)
    for k in range(spec.n - 1, -1, -1):
        delta[k] = max(0.0, delta[k + 1] + rho[k] * flow[k])
    profile = solve_linear(spec, s)
    return DropResult(
        delta=delta,
        delta0=float(delta[0]),
        argmin_bus=int(np.argmin(profile.voltage)),
    )
