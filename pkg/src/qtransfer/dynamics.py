"""Noisy quantum walk (Lindblad) and classical random walk propagation.

Units are dimensionless with hbar = 1, so the coherent part of the
generator is ``-i (1 - p) [A (+) 0, rho]`` where the sink row/column of
the Hamiltonian is zero.

Both generators are linear and time independent, so one fixed-size
Runge-Kutta step is a constant matrix; it is precomputed once per
trajectory and applied by a single mat-vec per step. The classical walk
uses classic RK4. The quantum walk defaults to integrating-factor (Lawson)
RK4: the coherent part is propagated exactly and RK4 handles only the
dissipators. Classic RK4 drifts out of positivity under long purely
unitary evolution; ``integrator="rk4"`` selects it anyway.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Literal

import numpy as np

from .graphs import WalkSetup, adjacency_matrix, transition_matrix

RateConvention = Literal["amplitude", "rate"]
RATE_CONVENTIONS: tuple[str, ...] = ("amplitude", "rate")
INTEGRATORS: tuple[str, ...] = ("lawson", "rk4")
DEFAULT_INTEGRATOR = "lawson"

DEFAULT_DT = 0.01
CHECKPOINT_EVERY = 100

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-9
PSD_TOL = 1e-7
PROB_SUM_TOL = 1e-7


class IntegrationError(RuntimeError):
    """Numerical invariant violated during time integration."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6g} (try a smaller dt)")
        self.time = time


def default_t_max(n: int) -> float:
    return 30.0 * n


@dataclass(frozen=True)
class LindbladSpec:
    """Parameters of the noisy-walk master equation on ``n`` vertices plus a sink.

    ``rate_convention='amplitude'`` uses jump operators ``T[m,k] |m><k|``
    (classical rates ``T[m,k]**2``); ``'rate'`` uses ``sqrt(T[m,k]) |m><k|``
    so that the ``p = 1`` dissipator reproduces the generator ``T - I``.
    """

    A: np.ndarray
    T: np.ndarray
    p: float
    gamma: float
    target: int
    rate_convention: RateConvention = "amplitude"

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"decoherence p must lie in [0, 1], got {self.p}")
        if self.gamma < 0:
            raise ValueError(f"sink coupling gamma must be >= 0, got {self.gamma}")
        if self.rate_convention not in RATE_CONVENTIONS:
            raise ValueError(f"unknown rate convention {self.rate_convention!r}")
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.T.shape != (n, n):
            raise ValueError("A and T must be square matrices of equal order")
        if not 0 <= self.target < n:
            raise ValueError(f"target {self.target} outside [0, {n})")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.n + 1

    @property
    def sink(self) -> int:
        return self.n

    def jump_rates(self) -> np.ndarray:
        """``|coefficient of L_mk|^2`` for every vertex pair."""
        if self.rate_convention == "amplitude":
            return self.T**2
        return self.T.copy()

    def jump_operators(self) -> list[tuple[float, np.ndarray]]:
        """Explicit ``(weight, L)`` list: the vertex jumps (weight p) and the sink jump (weight gamma)."""
        dim = self.dim
        coeff = self.T if self.rate_convention == "amplitude" else np.sqrt(self.T)
        ops = []
        for m, k in zip(*np.nonzero(self.T)):
            L = np.zeros((dim, dim))
            L[m, k] = coeff[m, k]
            ops.append((self.p, L))
        Ls = np.zeros((dim, dim))
        Ls[self.sink, self.target] = 1.0
        ops.append((self.gamma, Ls))
        return ops


def lindblad_spec_for(
    setup: WalkSetup, p: float, gamma: float = 1.0, rate_convention: RateConvention = "amplitude"
) -> LindbladSpec:
    return LindbladSpec(
        A=adjacency_matrix(setup.graph),
        T=transition_matrix(setup.graph),
        p=p,
        gamma=gamma,
        target=setup.target,
        rate_convention=rate_convention,
    )


def hamiltonian(spec: LindbladSpec) -> np.ndarray:
    H = np.zeros((spec.dim, spec.dim))
    H[: spec.n, : spec.n] = spec.A
    return H


def lindblad_rhs(rho: np.ndarray, spec: LindbladSpec) -> np.ndarray:
    """Time derivative of ``rho`` under the noisy-walk master equation."""
    rho = np.asarray(rho)
    if rho.shape != (spec.dim, spec.dim):
        raise ValueError(f"rho has shape {rho.shape}, expected {(spec.dim, spec.dim)}")
    n, s, t = spec.n, spec.sink, spec.target
    H = hamiltonian(spec)
    out = -1j * (1.0 - spec.p) * (H @ rho - rho @ H)

    # sum_mk W_mk (|m><k| rho |k><m| - 1/2 {|k><k|, rho}) in closed form
    W = spec.jump_rates()
    pops = np.real(np.diagonal(rho)[:n])
    loss = np.zeros(spec.dim)
    loss[:n] = W.sum(axis=0)
    gain = np.zeros(spec.dim, dtype=complex)
    gain[:n] = W @ pops
    out = out + spec.p * (np.diag(gain) - 0.5 * (loss[:, None] * rho + rho * loss[None, :]))

    sink_term = np.zeros_like(out)
    sink_term[s, s] = rho[t, t]
    sink_term[t, :] -= 0.5 * rho[t, :]
    sink_term[:, t] -= 0.5 * rho[:, t]
    return out + spec.gamma * sink_term


def coherent_superop(spec: LindbladSpec) -> np.ndarray:
    """Superoperator of ``-i (1-p) [H, rho]`` acting on row-major ``rho.reshape(-1)``."""
    eye = np.eye(spec.dim)
    H = hamiltonian(spec)
    # vec(X @ Y @ Z) = kron(X, Z.T) vec(Y) for row-major vec
    return -1j * (1.0 - spec.p) * (np.kron(H, eye) - np.kron(eye, H.T))


def dissipator_superop(spec: LindbladSpec) -> np.ndarray:
    eye = np.eye(spec.dim)
    sup = np.zeros((spec.dim**2, spec.dim**2), dtype=complex)
    for weight, L in spec.jump_operators():
        if weight == 0.0:
            continue
        LdL = L.conj().T @ L
        sup += weight * (np.kron(L, L.conj()) - 0.5 * np.kron(LdL, eye) - 0.5 * np.kron(eye, LdL.T))
    return sup


def liouvillian(spec: LindbladSpec) -> np.ndarray:
    """Full generator acting on row-major ``rho.reshape(-1)``."""
    return coherent_superop(spec) + dissipator_superop(spec)


def coherent_flow(spec: LindbladSpec, tau: float) -> np.ndarray:
    """Exact superoperator ``exp(tau * coherent_superop(spec))``."""
    evals, vecs = np.linalg.eigh(hamiltonian(spec))
    V = (vecs * np.exp(-1j * (1.0 - spec.p) * tau * evals)) @ vecs.T
    return np.kron(V, V.conj())


def lawson_rk4_propagator(E_half: np.ndarray, D: np.ndarray, dt: float) -> np.ndarray:
    """One integrating-factor RK4 step for ``dy/dt = (C + D) y`` with ``E_half = exp(C dt/2)``."""
    eye = np.eye(D.shape[0], dtype=complex)
    E_full = E_half @ E_half
    k1 = D
    k2 = D @ E_half @ (eye + 0.5 * dt * k1)
    k3 = D @ (E_half + 0.5 * dt * k2)
    k4 = D @ (E_full + dt * E_half @ k3)
    return E_full + (dt / 6.0) * (E_full @ k1 + 2.0 * E_half @ (k2 + k3) + k4)


def quantum_step_propagator(spec: LindbladSpec, dt: float, integrator: str = DEFAULT_INTEGRATOR) -> np.ndarray:
    if integrator == "rk4":
        return rk4_propagator(liouvillian(spec), dt)
    if integrator == "lawson":
        return lawson_rk4_propagator(coherent_flow(spec, 0.5 * dt), dissipator_superop(spec), dt)
    raise ValueError(f"unknown integrator {integrator!r}; expected one of {INTEGRATORS}")


def rk4_step(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, dt: float) -> np.ndarray:
    """One classic RK4 step for an autonomous ODE ``dy/dt = f(y)``."""
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_propagator(M: np.ndarray, dt: float) -> np.ndarray:
    """Exact one-step RK4 map for the linear system ``dy/dt = M y``."""
    hM = dt * M
    P = np.eye(M.shape[0], dtype=M.dtype)
    term = np.eye(M.shape[0], dtype=M.dtype)
    for k in range(1, 5):
        term = term @ hM / k
        P = P + term
    return P


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size

    def to_csv(self, path, stride: int = 10) -> None:
        write_trajectory_csv(self, path, stride)


def write_trajectory_csv(traj: Trajectory, path, stride: int = 10) -> None:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    idx = list(range(0, len(traj), stride))
    if idx and idx[-1] != len(traj) - 1:
        idx.append(len(traj) - 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "value"])
        for i in idx:
            w.writerow([repr(float(traj.times[i])), repr(float(traj.values[i]))])


def _n_steps(t_max: float, dt: float) -> int:
    if dt <= 0 or t_max <= 0:
        raise ValueError("dt and t_max must be positive")
    return int(math.ceil(t_max / dt - 1e-9))


def check_density_matrix(rho: np.ndarray, time: float) -> None:
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > HERMITIAN_TOL:
        raise IntegrationError(f"Hermiticity lost (|rho - rho^+| = {herm:.3g})", time)
    drift = abs(np.trace(rho) - 1.0)
    if drift > TRACE_TOL:
        raise IntegrationError(f"trace drift {drift:.3g}", time)
    lam = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lam < -PSD_TOL:
        raise IntegrationError(f"negative eigenvalue {lam:.3g}", time)


def evolve_density(
    spec: LindbladSpec,
    rho0: np.ndarray,
    t_max: float,
    dt: float = DEFAULT_DT,
    checkpoint_every: int = CHECKPOINT_EVERY,
    integrator: str = DEFAULT_INTEGRATOR,
) -> Iterator[tuple[float, np.ndarray]]:
    """Yield ``(t, rho)`` after every step, starting with ``(0, rho0)``.

    Density-matrix invariants are checked every ``checkpoint_every`` steps
    and at the final step; a violation raises :class:`IntegrationError`.
    The yielded array is a view into the integrator state; copy it to keep it.
    """
    dim = spec.dim
    steps = _n_steps(t_max, dt)
    P = quantum_step_propagator(spec, dt, integrator)
    r = np.asarray(rho0, dtype=complex).reshape(-1).copy()
    check_density_matrix(r.reshape(dim, dim), 0.0)
    yield 0.0, r.reshape(dim, dim)
    for k in range(1, steps + 1):
        r = P @ r
        t = k * dt
        rho = r.reshape(dim, dim)
        if k % checkpoint_every == 0 or k == steps:
            check_density_matrix(rho, t)
        yield t, rho


def integrate_quantum(
    spec: LindbladSpec,
    setup: WalkSetup,
    t_max: float,
    dt: float = DEFAULT_DT,
    stop_above: float | None = None,
    checkpoint_every: int = CHECKPOINT_EVERY,
    integrator: str = DEFAULT_INTEGRATOR,
) -> Trajectory:
    """Sink population ``rho_ss(t)`` for a walker started at ``setup.source``.

    With ``stop_above`` the integration ends at the first sample whose
    sink population exceeds that value.
    """
    if spec.n != setup.n or spec.target != setup.target:
        raise ValueError("Lindblad spec does not match the walk setup")
    dim = spec.dim
    rho0 = np.zeros((dim, dim), dtype=complex)
    rho0[setup.source, setup.source] = 1.0
    s = spec.sink
    times, values = [], []
    for t, rho in evolve_density(spec, rho0, t_max, dt, checkpoint_every, integrator):
        v = rho[s, s].real
        times.append(t)
        values.append(v)
        if stop_above is not None and v > stop_above:
            check_density_matrix(rho, t)
            break
    return Trajectory(np.array(times), np.array(values))


# ---------------------------------------------------------------------------
# Classical walk
# ---------------------------------------------------------------------------


def classical_generator(T: np.ndarray, target: int, absorbing: bool) -> np.ndarray:
    """``Q = T' - I``; with ``absorbing`` the target column of ``T`` becomes ``e_target``."""
    Tp = np.array(T, dtype=float)
    if absorbing:
        Tp[:, target] = 0.0
        Tp[target, target] = 1.0
    return Tp - np.eye(Tp.shape[0])


def integrate_classical(
    Q: np.ndarray,
    pi0: np.ndarray,
    target: int,
    t_max: float,
    dt: float = DEFAULT_DT,
    stop_above: float | None = None,
    checkpoint_every: int = CHECKPOINT_EVERY,
) -> Trajectory:
    """RK4 on ``dpi/dt = Q pi``; returns the target-vertex probability."""
    pi = np.asarray(pi0, dtype=float).copy()
    if np.any(pi < -1e-12) or abs(pi.sum() - 1.0) > 1e-9:
        raise ValueError("pi0 is not a probability distribution")
    steps = _n_steps(t_max, dt)
    P = rk4_propagator(np.asarray(Q, dtype=float), dt)
    times, values = [0.0], [pi[target]]
    for k in range(1, steps + 1):
        pi = P @ pi
        t = k * dt
        if k % checkpoint_every == 0 or k == steps:
            drift = abs(pi.sum() - 1.0)
            if drift > PROB_SUM_TOL:
                raise IntegrationError(f"probability-sum drift {drift:.3g}", t)
        times.append(t)
        values.append(pi[target])
        if stop_above is not None and pi[target] > stop_above:
            break
    return Trajectory(np.array(times), np.array(values))


def expm(M: np.ndarray, order: int = 18) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a truncated Taylor core."""
    M = np.asarray(M)
    norm = np.max(np.sum(np.abs(M), axis=0)) if M.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / (2.0**s)
    E = np.eye(M.shape[0], dtype=np.result_type(M, float))
    term = E.copy()
    for k in range(1, order + 1):
        term = term @ X / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def classical_propagate_exact(T: np.ndarray, pi0: np.ndarray, t: float) -> np.ndarray:
    """``exp(-t) * expm(T t) @ pi0`` for the non-absorbing walk."""
    if t < 0:
        raise ValueError("t must be >= 0")
    pi0 = np.asarray(pi0, dtype=float)
    if t == 0:
        return pi0.copy()
    return math.exp(-t) * (expm(np.asarray(T, dtype=float) * t) @ pi0)
