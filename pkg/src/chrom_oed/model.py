"""Domain types, prior/design boxes, Langmuir isotherm and the Gaussian
observation model.

Parameters are kept in physical units everywhere; the only place they are
mapped onto the reference cube ``[-1, 1]^4`` is :func:`affine_to_unit`, which
the sparse-grid surrogate uses at its boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES = ("b1", "b2", "qs", "ntp")


class DomainError(ValueError):
    """Input lies outside the domain of an operation."""


class ContractError(ValueError):
    """Arguments violate a shape or consistency contract."""


@dataclass(frozen=True)
class ModelParams:
    """Uncertain parameters of the two-component EDM plus the fixed phase ratio.

    Attributes
    ----------
    b1, b2 : float
        Langmuir constants [L/mol].
    qs : float
        Total adsorption capacity [mol/L].
    ntp : float
        Number of theoretical plates.
    f : float
        Phase ratio (volume of stationary over mobile phase).
    """

    b1: float
    b2: float
    qs: float
    ntp: float
    f: float = 1.5

    def __post_init__(self):
        vals = (self.b1, self.b2, self.qs, self.ntp)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise DomainError(f"model parameters must be positive, got {vals}")
        if self.ntp < 1:
            raise DomainError(f"ntp must be >= 1, got {self.ntp}")
        if not (np.isfinite(self.f) and self.f >= 0):
            raise DomainError(f"phase ratio must be nonnegative, got {self.f}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.b1, self.b2, self.qs, self.ntp])

    @classmethod
    def from_theta(cls, theta, f: float = 1.5) -> "ModelParams":
        b1, b2, qs, ntp = (float(v) for v in theta)
        return cls(b1, b2, qs, ntp, f)


@dataclass(frozen=True)
class ParamBox:
    """Axis-aligned box ``[lower, upper]`` over ``(b1, b2, qs, ntp)``."""

    lower: tuple[float, ...] = (0.02, 0.03, 8.0, 50.0)
    upper: tuple[float, ...] = (0.08, 0.17, 11.0, 180.0)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (4,) or hi.shape != (4,):
            raise ContractError("parameter box bounds must be 4-vectors")
        if not (np.all(lo > 0) and np.all(lo < hi)):
            raise DomainError(f"invalid parameter box {self.lower} .. {self.upper}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lo) and np.all(theta <= self.hi))


@dataclass(frozen=True)
class DesignPoint:
    """Injection time (dimensionless) and shared feed concentration [mol/L]."""

    tau_inj: float
    c_feed: float

    def __post_init__(self):
        if not (self.tau_inj > 0 and self.c_feed >= 0):
            raise DomainError(f"invalid design point ({self.tau_inj}, {self.c_feed})")


@dataclass(frozen=True)
class DesignBox:
    tau_range: tuple[float, float] = (0.05, 3.0)
    c_range: tuple[float, float] = (1.0, 15.0)

    def __post_init__(self):
        for lo, hi in (self.tau_range, self.c_range):
            if not (0 < lo < hi):
                raise DomainError(f"invalid design interval ({lo}, {hi})")
        object.__setattr__(self, "tau_range", tuple(float(v) for v in self.tau_range))
        object.__setattr__(self, "c_range", tuple(float(v) for v in self.c_range))

    def contains(self, d: DesignPoint, tol: float = 1e-12) -> bool:
        t0, t1 = self.tau_range
        c0, c1 = self.c_range
        return (t0 - tol <= d.tau_inj <= t1 + tol) and (c0 - tol <= d.c_feed <= c1 + tol)

    def lattice(self, n_tau: int, n_c: int) -> tuple[np.ndarray, np.ndarray]:
        """Equidistant lattice axes (sorted) spanning the box."""
        return np.linspace(*self.tau_range, n_tau), np.linspace(*self.c_range, n_c)


@dataclass(frozen=True)
class ObservationSchedule:
    times: tuple[float, ...]
    sigma: float = 0.05
    upsilon: float = 10.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size == 0:
            raise ContractError("observation times must be a nonempty 1-D sequence")
        if np.any(np.diff(t) <= 0):
            raise ContractError("observation times must be strictly increasing")
        if t[0] <= 0 or t[-1] >= self.upsilon:
            raise DomainError(f"observation times must lie in (0, {self.upsilon})")
        if not self.sigma > 0:
            raise DomainError("noise level sigma must be positive")
        object.__setattr__(self, "times", tuple(float(v) for v in t))

    @classmethod
    def equidistant(cls, n_s: int, start: float = 0.5, stop: float = 9.5,
                    sigma: float = 0.05, upsilon: float = 10.0) -> "ObservationSchedule":
        return cls(tuple(np.linspace(start, stop, n_s)), sigma, upsilon)

    @property
    def n_s(self) -> int:
        return len(self.times)

    @property
    def size(self) -> int:
        return 2 * len(self.times)


@dataclass(frozen=True)
class Observation:
    """Packed outlet measurements: all c1 values first, then all c2 values."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size % 2:
            raise ContractError("observation vector must be 1-D with even length")
        object.__setattr__(self, "values", v)

    @property
    def c1(self) -> np.ndarray:
        return self.values[: self.values.size // 2]

    @property
    def c2(self) -> np.ndarray:
        return self.values[self.values.size // 2:]


def _check_conc(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape[-1:] != (2,):
        raise ContractError("concentration must have trailing dimension 2")
    if np.any(c < 0):
        raise DomainError("negative concentration")
    return c


def langmuir(params: ModelParams, c) -> np.ndarray:
    """Competitive Langmuir loading ``q_i = Qs b_i c_i / (1 + b1 c1 + b2 c2)``.

    ``c`` may carry leading batch dimensions; the last axis holds the two
    components.
    """
    c = _check_conc(c)
    b = np.array([params.b1, params.b2])
    denom = 1.0 + c @ b
    return params.qs * b * c / denom[..., None]


def langmuir_jacobian(params: ModelParams, c) -> np.ndarray:
    """Jacobian ``dq_i/dc_j = Qs b_i (delta_ij D - c_i b_j) / D**2``."""
    c = _check_conc(c)
    b = np.array([params.b1, params.b2])
    denom = 1.0 + c @ b
    eye = np.eye(2)
    num = eye * denom[..., None, None] - c[..., :, None] * b[None, :]
    return params.qs * b[:, None] * num / (denom**2)[..., None, None]


def log_likelihood(obs, predicted, sigma: float) -> float:
    """Unnormalised Gaussian log-likelihood ``-||obs - pred||^2 / (2 sigma^2)``.

    The ``(2 pi sigma^2)^(-K/2)`` factor is omitted; it cancels in every
    ratio and difference this package forms.
    """
    obs = np.asarray(getattr(obs, "values", obs), dtype=float)
    predicted = np.asarray(getattr(predicted, "values", predicted), dtype=float)
    if obs.shape != predicted.shape:
        raise ContractError(f"length mismatch: {obs.shape} vs {predicted.shape}")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    r = obs - predicted
    return -float(r @ r) / (2.0 * sigma * sigma)


def affine_to_unit(box: ParamBox, theta) -> np.ndarray:
    """Map parameter vectors (last axis of length 4) from ``box`` to ``[-1, 1]^4``."""
    if isinstance(theta, ModelParams):
        theta = theta.theta
    theta = np.asarray(theta, dtype=float)
    lo, hi = box.lo, box.hi
    tol = 1e-12 * (hi - lo)
    if np.any(theta < lo - tol) or np.any(theta > hi + tol):
        raise DomainError(f"theta outside parameter box: {theta}")
    return np.clip((2.0 * theta - (lo + hi)) / (hi - lo), -1.0, 1.0)


def unit_to_affine(box: ParamBox, x) -> np.ndarray:
    """Inverse of :func:`affine_to_unit`."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise DomainError("point outside [-1, 1]^4")
    lo, hi = box.lo, box.hi
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
