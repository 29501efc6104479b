"""Method-of-lines solver for the rescaled two-component Equilibrium
Dispersive Model.

Space is discretised with the Koren flux-limited finite-volume scheme; time is
advanced with classical RK4.

Grid layouts
------------
* ``grid="cell"`` (default): ``n_cells`` control volumes of width
  ``dy = 1/n_cells`` with nodes at ``(m - 1/2) dy``; the first and last faces
  sit on the column ends ``y = 0`` and ``y = 1``.
* ``grid="vertex"``: nodes ``y_m = m dy`` with ``dy = 1/(n_cells + 1)``.  The
  end faces then sit half a cell inside the column, which shortens the
  discrete column by ``dy`` and makes outlet curves first-order accurate.

Boundary treatment
------------------
* Inlet (Danckwerts): the boundary value is reconstructed from a one-sided
  difference, ``c(0) = (c_in + k c_1) / (1 + k)`` with ``k = 1/(2 Ntp h0)``
  and ``h0`` the distance from the inlet to the first node, so that the total
  (convective minus dispersive) inlet flux equals ``c_in``.
* Outlet: zero gradient through a ghost value equal to ``c_{n_cells}``;
  the outlet concentration is read at the last node.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numba
import numpy as np

from .model import ContractError, DesignPoint, ModelParams, Observation, ObservationSchedule

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "BreakthroughCurve",
    "SolverError",
    "flux_limiter",
    "flux_ratio",
    "koren_rhs",
    "rk4_step",
    "integrate",
    "solve_forward",
    "observe",
]


class SolverError(RuntimeError):
    """Numerical failure of the forward solver (blow-up, singular mass matrix)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    """Discretisation settings.

    ``dt=None`` selects the step from the stability bound
    ``min(cfl * dy, diff_safety * ntp * dy**2)``; an explicit ``dt`` is
    capped by the same bound.
    """

    n_cells: int = 100
    dt: float | None = None
    upsilon: float = 10.0
    eta: float = 1e-10
    dense_output_stride: int = 1
    cfl: float = 0.4
    diff_safety: float = 0.8
    grid: str = "cell"

    def __post_init__(self):
        if self.n_cells < 8:
            raise ContractError("n_cells must be >= 8")
        if self.dt is not None and not self.dt > 0:
            raise ContractError("dt must be positive")
        if not (self.eta > 0 and self.eta <= 1e-8):
            raise ContractError("eta must lie in (0, 1e-8]")
        if self.dense_output_stride < 1:
            raise ContractError("dense_output_stride must be >= 1")
        if self.grid not in ("cell", "vertex"):
            raise ContractError("grid must be 'cell' or 'vertex'")
        if not (0 < self.cfl <= 1.0 and 0 < self.diff_safety <= 1.2):
            raise ContractError("cfl/diff_safety outside the stable range")

    @property
    def dy(self) -> float:
        if self.grid == "cell":
            return 1.0 / self.n_cells
        return 1.0 / (self.n_cells + 1)

    @property
    def h0(self) -> float:
        """Distance from the inlet to the first unknown."""
        return 0.5 * self.dy if self.grid == "cell" else self.dy

    def nodes(self) -> np.ndarray:
        m = np.arange(1, self.n_cells + 1)
        return (m - 0.5) * self.dy if self.grid == "cell" else m * self.dy

    def max_dt(self, ntp: float) -> float:
        dy = self.dy
        bound = min(self.cfl * dy, self.diff_safety * ntp * dy * dy)
        return bound if self.dt is None else min(self.dt, bound)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class BreakthroughCurve:
    """Outlet concentrations ``c_i(1, tau)`` on an increasing time grid."""

    times: np.ndarray
    c1_out: np.ndarray
    c2_out: np.ndarray
    min_state: float = 0.0

    def __post_init__(self):
        if not (len(self.times) == len(self.c1_out) == len(self.c2_out)):
            raise ContractError("curve arrays must have equal length")

    def resample(self, times) -> np.ndarray:
        """Linear interpolation onto ``times``; returns array of shape (2, len(times))."""
        times = np.asarray(times, dtype=float)
        if times.min() < self.times[0] - 1e-12 or times.max() > self.times[-1] + 1e-12:
            raise ContractError("requested times outside the curve support")
        return np.vstack([np.interp(times, self.times, self.c1_out),
                          np.interp(times, self.times, self.c2_out)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "c1_out", "c2_out"])
            for row in zip(self.times, self.c1_out, self.c2_out):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "BreakthroughCurve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, comments="#")
        return cls(data[:, 0], data[:, 1], data[:, 2])


def flux_limiter(r):
    """Koren limiter ``max(0, min(2r, min(1/3 + 2r/3, 2)))``."""
    r = np.asarray(r, dtype=float)
    out = np.maximum(0.0, np.minimum(2.0 * r, np.minimum(1.0 / 3.0 + 2.0 * r / 3.0, 2.0)))
    return float(out) if out.ndim == 0 else out


def flux_ratio(f_prev, f_curr, f_next, eta: float = 1e-10):
    """Ratio of consecutive flux differences, regularised by ``eta``."""
    return (np.asarray(f_next) - f_curr + eta) / (np.asarray(f_curr) - f_prev + eta)


@numba.njit(cache=True, nogil=True)
def _limiter(r):
    a = 1.0 / 3.0 + 2.0 * r / 3.0
    if a > 2.0:
        a = 2.0
    b = 2.0 * r
    if b < a:
        a = b
    return a if a > 0.0 else 0.0


@numba.njit(cache=True, nogil=True)
def _rhs(c, inlet, b1, b2, qs, ntp, ff, dy, eta, fh, gh, out, h0):
    """Koren right-hand side. ``c`` has shape (2, n); fh/gh are (n + 1,) work arrays;
    ``h0`` is the distance from the inlet to the first node."""
    n = c.shape[1]
    diff = 1.0 / (2.0 * ntp)
    k = diff / h0
    for i in range(2):
        ci = c[i]
        c_bnd = (inlet[i] + k * ci[0]) / (1.0 + k)
        fh[0] = c_bnd
        fh[1] = ci[0]
        for m in range(2, n):
            back = ci[m - 1] - ci[m - 2]
            r = (ci[m] - ci[m - 1] + eta) / (back + eta)
            fh[m] = ci[m - 1] + 0.5 * _limiter(r) * back
        fh[n] = ci[n - 1]
        gh[0] = (ci[0] - c_bnd) / h0
        for m in range(1, n):
            gh[m] = (ci[m] - ci[m - 1]) / dy
        gh[n] = 0.0
        for m in range(n):
            out[i, m] = -((fh[m + 1] - fh[m]) - diff * (gh[m + 1] - gh[m])) / dy
    # mass matrix (I + F Q) per node, Q at the nonnegative part of the state
    for m in range(n):
        x1 = c[0, m] if c[0, m] > 0.0 else 0.0
        x2 = c[1, m] if c[1, m] > 0.0 else 0.0
        den = 1.0 + b1 * x1 + b2 * x2
        s = qs / (den * den)
        a11 = 1.0 + ff * s * b1 * (den - x1 * b1)
        a12 = -ff * s * b1 * x1 * b2
        a21 = -ff * s * b2 * x2 * b1
        a22 = 1.0 + ff * s * b2 * (den - x2 * b2)
        det = a11 * a22 - a12 * a21
        if not det > 0.0:
            return False
        r1 = out[0, m]
        r2 = out[1, m]
        out[0, m] = (a22 * r1 - a12 * r2) / det
        out[1, m] = (a11 * r2 - a21 * r1) / det
    return True


@numba.njit(cache=True, nogil=True)
def _integrate(c, inlets, dts, nsteps, b1, b2, qs, ntp, ff, dy, h0, eta, stride, blowup):
    """RK4 over consecutive phases with constant inlet per phase.

    Returns (times, outlet (2, n_rec), status, failed_step, min_state); status
    0 = ok, 1 = singular mass matrix, 2 = non-finite or blown-up state.
    """
    n = c.shape[1]
    total = 0
    for p in range(nsteps.shape[0]):
        total += nsteps[p]
    n_rec = total // stride + 2
    times = np.empty(n_rec)
    outlet = np.empty((2, n_rec))
    fh = np.empty(n + 1)
    gh = np.empty(n + 1)
    k1 = np.empty((2, n))
    k2 = np.empty((2, n))
    k3 = np.empty((2, n))
    k4 = np.empty((2, n))
    tmp = np.empty((2, n))
    inlet = np.empty(2)
    tau = 0.0
    rec = 0
    times[0] = 0.0
    outlet[0, 0] = c[0, n - 1]
    outlet[1, 0] = c[1, n - 1]
    rec = 1
    step = 0
    cmin = 0.0
    for p in range(nsteps.shape[0]):
        inlet[0] = inlets[p, 0]
        inlet[1] = inlets[p, 1]
        dt = dts[p]
        for s in range(nsteps[p]):
            if not _rhs(c, inlet, b1, b2, qs, ntp, ff, dy, eta, fh, gh, k1, h0):
                return times[:rec], outlet[:, :rec], 1, step, cmin
            for i in range(2):
                for m in range(n):
                    tmp[i, m] = c[i, m] + 0.5 * dt * k1[i, m]
            if not _rhs(tmp, inlet, b1, b2, qs, ntp, ff, dy, eta, fh, gh, k2, h0):
                return times[:rec], outlet[:, :rec], 1, step, cmin
            for i in range(2):
                for m in range(n):
                    tmp[i, m] = c[i, m] + 0.5 * dt * k2[i, m]
            if not _rhs(tmp, inlet, b1, b2, qs, ntp, ff, dy, eta, fh, gh, k3, h0):
                return times[:rec], outlet[:, :rec], 1, step, cmin
            for i in range(2):
                for m in range(n):
                    tmp[i, m] = c[i, m] + dt * k3[i, m]
            if not _rhs(tmp, inlet, b1, b2, qs, ntp, ff, dy, eta, fh, gh, k4, h0):
                return times[:rec], outlet[:, :rec], 1, step, cmin
            ok = True
            for i in range(2):
                for m in range(n):
                    v = c[i, m] + dt / 6.0 * (k1[i, m] + 2.0 * k2[i, m] + 2.0 * k3[i, m] + k4[i, m])
                    if not (abs(v) < blowup):
                        ok = False
                    if v < cmin:
                        cmin = v
                    c[i, m] = v
            step += 1
            tau += dt
            if not ok:
                return times[:rec], outlet[:, :rec], 2, step, cmin
            if step % stride == 0 or step == total:
                times[rec] = tau
                outlet[0, rec] = c[0, n - 1]
                outlet[1, rec] = c[1, n - 1]
                rec += 1
    return times[:rec], outlet[:, :rec], 0, step, cmin


def koren_rhs(state, params: ModelParams, inlet, config: SolverConfig) -> np.ndarray:
    """Time derivative of the interior state (shape ``(2, n_cells)``)."""
    c = np.ascontiguousarray(state, dtype=float)
    if c.shape != (2, config.n_cells):
        raise ContractError(f"state must have shape (2, {config.n_cells})")
    if not np.all(np.isfinite(c)):
        raise ContractError("state contains non-finite values")
    n = c.shape[1]
    out = np.empty_like(c)
    ok = _rhs(c, np.asarray(inlet, dtype=float).reshape(2), params.b1, params.b2,
              params.qs, params.ntp, params.f, config.dy, config.eta,
              np.empty(n + 1), np.empty(n + 1), out, config.h0)
    if not ok:
        raise SolverError("singular mass matrix I + F Q")
    return out


def rk4_step(state, rhs, dt: float, t: float = 0.0):
    """One classical RK4 step for ``y' = rhs(t, y)``."""
    if not dt > 0:
        raise ContractError("dt must be positive")
    y = np.asarray(state, dtype=float)
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    y_new = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y_new)):
        raise SolverError(f"non-finite state after RK4 step at t={t + dt:g}")
    return y_new


def _phase_steps(length: float, dt_max: float) -> tuple[int, float]:
    n = max(1, int(np.ceil(length / dt_max - 1e-9)))
    return n, length / n


def integrate(params: ModelParams, config: SolverConfig, phases, state0=None,
              blowup_factor: float = 1e3) -> tuple[BreakthroughCurve, np.ndarray]:
    """Integrate over piecewise-constant inlet phases ``[(duration, (c1_in, c2_in)), ...]``.

    Returns the outlet curve and the final interior state.
    """
    n = config.n_cells
    c = np.zeros((2, n)) if state0 is None else np.array(state0, dtype=float, copy=True)
    if c.shape != (2, n):
        raise ContractError(f"initial state must have shape (2, {n})")
    dt_max = config.max_dt(params.ntp)
    nsteps, dts, inlets = [], [], []
    for length, inlet in phases:
        if length <= 0:
            continue
        k, dt = _phase_steps(length, dt_max)
        nsteps.append(k)
        dts.append(dt)
        inlets.append(inlet)
    scale = max(1.0, float(np.max(np.abs(inlets))) if inlets else 1.0, float(np.abs(c).max(initial=0.0)))
    times, outlet, status, step, cmin = _integrate(
        c, np.asarray(inlets, dtype=float).reshape(-1, 2), np.asarray(dts, dtype=float),
        np.asarray(nsteps, dtype=np.int64), params.b1, params.b2, params.qs, params.ntp,
        params.f, config.dy, config.h0, config.eta, config.dense_output_stride, blowup_factor * scale)
    if status == 1:
        raise SolverError(f"singular mass matrix at step {step}", step=step)
    if status == 2:
        raise SolverError(f"state blow-up at step {step} (params={params})", step=step)
    return BreakthroughCurve(times, outlet[0].copy(), outlet[1].copy(), float(cmin)), c


def solve_forward(params: ModelParams, design: DesignPoint, config: SolverConfig) -> BreakthroughCurve:
    """Breakthrough curves for a rectangular injection of length ``tau_inj``.

    The injection end is aligned with a step boundary; the feed phase and
    the elution phase each use a uniform step no larger than the stability
    bound.
    """
    if not design.tau_inj < config.upsilon:
        raise ContractError("injection time must be shorter than the horizon")
    phases = [(design.tau_inj, (design.c_feed, design.c_feed)),
              (config.upsilon - design.tau_inj, (0.0, 0.0))]
    curve, _ = integrate(params, config, phases)
    return curve


def observe(curve: BreakthroughCurve, schedule: ObservationSchedule) -> Observation:
    """Sample the outlet curve at the schedule times (negatives clipped to zero)."""
    vals = curve.resample(schedule.times)
    return Observation(np.maximum(vals, 0.0).ravel())
