"""Binary transfer-efficiency labels from first threshold crossings."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache, partial
from typing import Callable, Sequence

import numpy as np

from ._parallel import parallel_map
from .dynamics import (
    DEFAULT_DT,
    DEFAULT_INTEGRATOR,
    INTEGRATORS,
    RATE_CONVENTIONS,
    Trajectory,
    classical_generator,
    default_t_max,
    integrate_classical,
    integrate_quantum,
    lindblad_spec_for,
)
from .graphs import WalkSetup, transition_matrix

TIE_TOL = 1e-9
BISECT_TOL = 1e-3


class HorizonError(RuntimeError):
    """Neither walker crossed the threshold within the integration horizon."""


@dataclass(frozen=True)
class SimulationParams:
    """Convention flags and integration settings shared by labelling and datasets."""

    gamma: float = 1.0
    dt: float = DEFAULT_DT
    t_max: float | None = None  # None -> 30 n
    log_base: float = math.e
    rate_convention: str = "rate"
    integrator: str = DEFAULT_INTEGRATOR

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.t_max is not None and self.t_max <= 0:
            raise ValueError("t_max must be > 0")
        if self.log_base <= 1:
            raise ValueError("log base must be > 1")
        if self.rate_convention not in RATE_CONVENTIONS:
            raise ValueError(f"rate convention must be one of {RATE_CONVENTIONS}")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}")

    def horizon(self, n: int) -> float:
        return self.t_max if self.t_max is not None else default_t_max(n)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TransferOutcome:
    threshold: float
    t_quantum: float | None
    t_classical: float | None
    label: int
    p: float


def threshold(n: int, base: float = math.e) -> float:
    """Arrival threshold ``1 / log_base(n)``."""
    if n <= 2:
        raise ValueError(f"threshold needs n >= 3, got {n}")
    value = 1.0 / math.log(n, base) if base != math.e else 1.0 / math.log(n)
    if value >= 1.0:
        raise ValueError(f"threshold 1/log_{base:g}({n}) = {value:.4g} is not below 1")
    return value


def first_crossing(traj: Trajectory, thr: float) -> float | None:
    """First time the trajectory exceeds ``thr``, linearly interpolated."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    above = np.flatnonzero(traj.values > thr)
    if above.size == 0:
        return None
    i = int(above[0])
    if i == 0:
        return float(traj.times[0])
    t0, t1 = traj.times[i - 1], traj.times[i]
    v0, v1 = traj.values[i - 1], traj.values[i]
    return float(t0 + (thr - v0) / (v1 - v0) * (t1 - t0))


@lru_cache(maxsize=256)
def classical_crossing_time(setup: WalkSetup, thr: float, dt: float, t_max: float) -> float | None:
    """First-arrival time of the absorbed classical walker (independent of p)."""
    Q = classical_generator(transition_matrix(setup.graph), setup.target, absorbing=True)
    pi0 = np.zeros(setup.n)
    pi0[setup.source] = 1.0
    traj = integrate_classical(Q, pi0, setup.target, t_max, dt, stop_above=thr)
    return first_crossing(traj, thr)


def label(setup: WalkSetup, p: float, params: SimulationParams = SimulationParams()) -> TransferOutcome:
    """Label 1 when the quantum sink population crosses the threshold strictly first."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    thr = threshold(setup.n, params.log_base)
    t_max = params.horizon(setup.n)
    spec = lindblad_spec_for(setup, p, params.gamma, params.rate_convention)
    q_traj = integrate_quantum(spec, setup, t_max, params.dt, stop_above=thr, integrator=params.integrator)
    t_q = first_crossing(q_traj, thr)
    t_c = classical_crossing_time(setup, thr, params.dt, t_max)
    if t_q is None and t_c is None:
        raise HorizonError(
            f"{setup.kind}, p={p}: no walker crossed {thr:.4g} by t_max={t_max}; increase t_max"
        )
    quantum_first = t_q is not None and (t_c is None or t_q < t_c - TIE_TOL)
    return TransferOutcome(thr, t_q, t_c, int(quantum_first), float(p))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def bisect_transition(
    f: Callable[[float], int], lo: float, hi: float, f_lo: int, tol: float = BISECT_TOL
) -> float:
    """Locate where ``f`` changes from ``f_lo`` between ``lo`` and ``hi``."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) == f_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def transition_points(
    grid: Sequence[float], labels: Sequence[int], f: Callable[[float], int], tol: float = BISECT_TOL
) -> list[float]:
    points = []
    for i in range(len(grid) - 1):
        if labels[i] != labels[i + 1]:
            points.append(bisect_transition(f, grid[i], grid[i + 1], labels[i], tol))
    return points


@dataclass
class SweepResult:
    setup: WalkSetup
    params: SimulationParams
    outcomes: list[TransferOutcome]
    transitions: list[float] = field(default_factory=list)

    @property
    def p_star(self) -> float | None:
        """Crossover estimate; None for a constant or non-monotone label curve."""
        return self.transitions[0] if len(self.transitions) == 1 else None

    @property
    def labels(self) -> list[int]:
        return [o.label for o in self.outcomes]

    def summary(self) -> dict:
        return {
            "graph": self.setup.kind,
            "p_star": self.p_star,
            "transitions": self.transitions,
            "grid_size": len(self.outcomes),
            "conventions": self.params.to_dict(),
        }


def _label_value(setup: WalkSetup, params: SimulationParams, p: float) -> int:
    return label(setup, p, params).label


def _outcome(setup: WalkSetup, params: SimulationParams, p: float) -> TransferOutcome:
    return label(setup, p, params)


def sweep_ground_truth(
    setup: WalkSetup,
    grid: Sequence[float],
    params: SimulationParams = SimulationParams(),
    workers: int = 1,
) -> SweepResult:
    grid = [float(p) for p in grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    if grid and (grid[0] < 0 or grid[-1] > 1):
        raise ValueError("grid must lie in [0, 1]")
    outcomes = parallel_map(partial(_outcome, setup, params), grid, workers)
    labels = [o.label for o in outcomes]
    points = transition_points(grid, labels, partial(_label_value, setup, params))
    return SweepResult(setup, params, outcomes, points)


def linear_grid(size: int) -> list[float]:
    if size < 1:
        raise ValueError("grid size must be >= 1")
    if size == 1:
        return [0.0]
    return [float(x) for x in np.linspace(0.0, 1.0, size)]


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "label", "t_quantum", "t_classical"])
        for o in result.outcomes:
            w.writerow([
                repr(o.p),
                o.label,
                "" if o.t_quantum is None else repr(o.t_quantum),
                "" if o.t_classical is None else repr(o.t_classical),
            ])
