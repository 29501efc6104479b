"""Delayed Rejection Adaptive Metropolis (DRAM) for the EDM posterior.

One delayed-rejection stage follows every rejected first-stage proposal; the
second proposal uses the first-stage covariance scaled by ``dr_scale``.  The
first-stage covariance is adapted (Haario-style) from the whole chain history
every ``adapt_interval`` iterations once ``adapt_start`` is reached:
``C = 2.4**2 / dim * (Cov(history) + eps * I)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import PARAM_NAMES, DesignPoint, ObservationSchedule, ParamBox

__all__ = ["DramConfig", "Chain", "DramError", "log_posterior", "make_log_posterior",
           "dram_run", "chain_summary", "iact"]


class DramError(RuntimeError):
    pass


@dataclass(frozen=True)
class DramConfig:
    n_iter: int = 80_000
    burn_in: int = 30_000
    x0: tuple | None = None
    cov0: tuple | None = None     # nested tuples (dim x dim)
    adapt_interval: int = 100
    adapt_start: int = 1000
    dr_scale: float = 0.2
    eps: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("burn_in must be smaller than the chain length")
        if not 0 < self.dr_scale < 1:
            raise ValueError("dr_scale must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.adapt_interval < 1:
            raise ValueError("adapt_interval must be >= 1")

    @classmethod
    def for_box(cls, box: ParamBox, **kwargs) -> "DramConfig":
        """Start at the box midpoint with proposal std of 1/20 of each width."""
        cov = np.diag((box.width / 20.0) ** 2)
        kwargs.setdefault("x0", tuple(box.midpoint))
        kwargs.setdefault("cov0", tuple(map(tuple, cov)))
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Chain:
    samples: np.ndarray        # (kept, dim), post burn-in
    logpost: np.ndarray        # (kept,)
    accepted: tuple[int, int]  # (stage 1, stage 2) over the full run
    proposed: tuple[int, int]
    config: DramConfig
    names: tuple = PARAM_NAMES

    @property
    def acceptance_rate(self) -> float:
        return sum(self.accepted) / self.config.n_iter

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(list(self.names) + ["logpost"])
            for x, lp in zip(self.samples, self.logpost):
                w.writerow([repr(float(v)) for v in x] + [repr(float(lp))])


def log_posterior(theta, obs, schedule: ObservationSchedule, d: DesignPoint, backend,
                  box: ParamBox) -> float:
    """Unnormalised log-posterior under a uniform prior on ``box``."""
    theta = np.asarray(theta, dtype=float)
    if not box.contains(theta):
        return -math.inf
    pred = backend.observation_fn(d, schedule)(theta)
    r = np.asarray(getattr(obs, "values", obs)) - pred
    return -float(r @ r) / (2.0 * schedule.sigma ** 2)


def make_log_posterior(obs, schedule: ObservationSchedule, d: DesignPoint, backend,
                       box: ParamBox):
    """Closure form of :func:`log_posterior` with the forward map bound once."""
    fn = backend.observation_fn(d, schedule)
    y = np.asarray(getattr(obs, "values", obs), dtype=float)
    lo, hi = box.lo, box.hi
    scale = 1.0 / (2.0 * schedule.sigma ** 2)

    def target(theta):
        if np.any(theta < lo) or np.any(theta > hi):
            return -math.inf
        r = y - fn(theta)
        return -float(r @ r) * scale

    return target


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None


def dram_run(config: DramConfig, target, names=None) -> Chain:
    """Run DRAM on ``target`` (log-density, returns ``-inf`` outside the support)."""
    if config.x0 is None or config.cov0 is None:
        raise ValueError("DramConfig needs x0 and cov0 (see DramConfig.for_box)")
    x = np.array(config.x0, dtype=float)
    dim = x.size
    L = _cholesky(np.array(config.cov0, dtype=float))
    if L is None or L.shape != (dim, dim):
        raise ValueError("initial covariance must be symmetric positive definite")
    lp = target(x)
    if not np.isfinite(lp):
        raise DramError(f"initial point has non-finite log-density {lp}")

    n = config.n_iter
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal((n, 2, dim))
    u = rng.random((n, 2))
    dr = math.sqrt(config.dr_scale)
    sd = 2.4 ** 2 / dim

    chain = np.empty((n, dim))
    lps = np.empty(n)
    acc = [0, 0]
    prop = [0, 0]
    # running sums of the history, shifted by x0 for conditioning
    shift = x.copy()
    s1 = np.zeros(dim)
    s2 = np.zeros((dim, dim))
    counted = 0

    for t in range(n):
        z1 = z[t, 0]
        y1 = x + L @ z1
        lp1 = target(y1)
        prop[0] += 1
        diff1 = lp1 - lp
        a1 = 1.0 if diff1 >= 0 else math.exp(diff1)
        if u[t, 0] < a1:
            x, lp = y1, lp1
            acc[0] += 1
        else:
            y2 = x + dr * (L @ z[t, 1])
            lp2 = target(y2)
            prop[1] += 1
            if lp2 > -math.inf:
                d21 = lp1 - lp2
                a1_rev = 1.0 if d21 >= 0 else math.exp(d21)
                if a1_rev < 1.0:
                    w = np.linalg.solve(L, y1 - y2)
                    # log q1(y1 | y2) - log q1(y1 | x)
                    lq = -0.5 * (w @ w - z1 @ z1)
                    log_a2 = (lp2 - lp) + lq + math.log1p(-a1_rev) - math.log1p(-a1)
                    if log_a2 >= 0 or u[t, 1] < math.exp(log_a2):
                        x, lp = y2, lp2
                        acc[1] += 1
        chain[t] = x
        lps[t] = lp

        if t + 1 >= config.adapt_start and (t + 1) % config.adapt_interval == 0:
            block = chain[counted:t + 1] - shift
            s1 += block.sum(axis=0)
            s2 += block.T @ block
            counted = t + 1
            mean = s1 / counted
            cov = (s2 - counted * np.outer(mean, mean)) / (counted - 1)
            L_new = _cholesky(sd * (cov + config.eps * np.eye(dim)))
            if L_new is not None:
                L = L_new

    if acc[0] + acc[1] == 0:
        raise DramError("no proposal was accepted; check the target and the initial covariance")
    b = config.burn_in
    if names is None:
        names = PARAM_NAMES if dim == 4 else tuple(f"x{i}" for i in range(dim))
    return Chain(chain[b:].copy(), lps[b:].copy(), tuple(acc), tuple(prop), config, tuple(names))


def iact(x) -> float:
    """Integrated autocorrelation time with Sokal's adaptive window (c = 5)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    var = xc @ xc / n
    if n < 2 or var == 0:
        return math.nan
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acf = np.fft.irfft(f * np.conj(f), nfft)[:n] / (n * var)
    taus = 2.0 * np.cumsum(acf) - 1.0
    window = np.arange(n) >= 5.0 * taus
    m = int(np.argmax(window)) if window.any() else n - 1
    return float(max(taus[m], 1e-12))


def chain_summary(chain) -> dict:
    """Per-parameter mean, std, central 95% interval and IACT."""
    samples = chain.samples if isinstance(chain, Chain) else np.asarray(chain, dtype=float)
    names = chain.names if isinstance(chain, Chain) else tuple(f"x{i}" for i in range(samples.shape[1]))
    if samples.shape[0] == 0:
        raise ValueError("empty chain")
    out = {}
    for i, name in enumerate(names):
        col = samples[:, i]
        lo, hi = np.percentile(col, [2.5, 97.5])
        out[name] = {"mean": float(col.mean()), "std": float(col.std(ddof=0)),
                     "ci95": [float(lo), float(hi)], "iact": iact(col)}
    stds = [out[nm]["std"] for nm in names]
    out["_std_product"] = float(np.prod(stds))
    if isinstance(chain, Chain):
        out["_acceptance"] = {"stage1": chain.accepted[0], "stage2": chain.accepted[1],
                              "rate": chain.acceptance_rate}
    return out


def summary_to_json(summary: dict, path) -> None:
    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, list):
            return [clean(v) for v in o]
        return o
    with open(path, "w") as fh:
        json.dump(clean(summary), fh, indent=2)
