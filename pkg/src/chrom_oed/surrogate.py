"""Sparse-grid surrogate of the outlet breakthrough curves.

For every node of a rectangular design lattice one PSLI interpolant over the
4-D parameter box is trained; its output channels are both outlet curves
sampled on a fixed dense time grid (``c1`` block then ``c2`` block).  Designs
between lattice nodes are handled by bilinear blending of the four
surrounding interpolants.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .edm_solver import BreakthroughCurve, SolverConfig, SolverError, observe, solve_forward
from .model import (DesignBox, DesignPoint, DomainError, ModelParams, Observation,
                    ObservationSchedule, ParamBox, affine_to_unit, unit_to_affine)
from .sparse_grid import SparseGrid, SparseGridInterpolant

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class SurrogateTrainingError(RuntimeError):
    def __init__(self, message, theta=None, design=None):
        super().__init__(message)
        self.theta = theta
        self.design = design


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def solver_curves(params: ModelParams, design: DesignPoint, config: SolverConfig,
                  time_grid) -> np.ndarray:
    """Solver outlet curves resampled on ``time_grid``, flattened to ``(2 * n_time,)``."""
    return solve_forward(params, design, config).resample(time_grid).ravel()


@dataclass
class SurrogateModel:
    solver_config: SolverConfig
    param_box: ParamBox
    design_box: DesignBox
    tau_axis: np.ndarray
    c_axis: np.ndarray
    grid: SparseGrid
    time_grid: np.ndarray
    interpolants: list  # [i_tau][i_c] -> SparseGridInterpolant
    phase_ratio: float = 1.5
    provenance: dict = field(default_factory=dict)
    _operators: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_time(self) -> int:
        return self.time_grid.size

    def spec_dict(self) -> dict:
        """Everything that determines the training data."""
        return {
            "format": FORMAT_VERSION,
            "solver": self.solver_config.to_dict(),
            "param_box": [list(self.param_box.lower), list(self.param_box.upper)],
            "design_box": [list(self.design_box.tau_range), list(self.design_box.c_range)],
            "n_tau": int(self.tau_axis.size),
            "n_c": int(self.c_axis.size),
            "q": self.grid.q,
            "placement": self.grid.placement,
            "n_time": self.n_time,
            "phase_ratio": self.phase_ratio,
        }

    # -- persistence ------------------------------------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        hashes = {}
        for it in range(self.tau_axis.size):
            for ic in range(self.c_axis.size):
                name = _node_file(it, ic)
                interp = self.interpolants[it][ic]
                interp.save(directory / name)
                hashes[name] = interp.content_hash()
        _write_manifest(directory, self.spec_dict(), hashes, self.provenance)

    @classmethod
    def load(cls, directory) -> "SurrogateModel":
        directory = Path(directory)
        man = json.loads((directory / MANIFEST).read_text())
        spec = man["spec"]
        model = _empty_model(spec)
        for it in range(spec["n_tau"]):
            for ic in range(spec["n_c"]):
                name = _node_file(it, ic)
                interp = SparseGridInterpolant.load(directory / name)
                if interp.content_hash() != man["nodes"].get(name):
                    raise ValueError(f"hash mismatch for {name}")
                model.interpolants[it][ic] = interp
        model.grid = model.interpolants[0][0].grid
        model.provenance = man.get("provenance", {})
        return model


def _node_file(it: int, ic: int) -> str:
    return f"node_{it:03d}_{ic:03d}.npz"


def _write_manifest(directory: Path, spec: dict, hashes: dict, provenance: dict) -> None:
    man = {"spec": spec, "spec_hash": config_hash(spec), "nodes": hashes,
           "provenance": provenance}
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(man, indent=2, sort_keys=True))
    tmp.replace(directory / MANIFEST)


def _empty_model(spec: dict) -> SurrogateModel:
    solver = SolverConfig(**spec["solver"])
    pbox = ParamBox(tuple(spec["param_box"][0]), tuple(spec["param_box"][1]))
    dbox = DesignBox(tuple(spec["design_box"][0]), tuple(spec["design_box"][1]))
    tau_axis, c_axis = dbox.lattice(spec["n_tau"], spec["n_c"])
    grid = SparseGrid.create(4, spec["q"], spec["placement"])
    time_grid = np.linspace(0.0, solver.upsilon, spec["n_time"])
    interps = [[None] * spec["n_c"] for _ in range(spec["n_tau"])]
    return SurrogateModel(solver, pbox, dbox, tau_axis, c_axis, grid, time_grid, interps,
                          spec["phase_ratio"])


def train(solver_config: SolverConfig, param_box: ParamBox, design_box: DesignBox,
          n_tau: int, n_c: int, q: int, placement: str = "equidistant", n_time: int = 512,
          phase_ratio: float = 1.5, out_dir=None, progress=None,
          provenance: dict | None = None) -> SurrogateModel:
    """Run the solver at every (sparse node, design node) pair and build the model.

    With ``out_dir`` each finished design node is written immediately, and
    an existing directory trained with the same settings is resumed.
    ``provenance`` entries are copied into the manifest.
    """
    if n_tau < 2 or n_c < 2:
        raise ValueError("design lattice needs at least 2 nodes per direction")
    if q < 4:
        raise ValueError("q must be >= 4 for a 4-D parameter space")
    spec = {
        "format": FORMAT_VERSION, "solver": solver_config.to_dict(),
        "param_box": [list(param_box.lower), list(param_box.upper)],
        "design_box": [list(design_box.tau_range), list(design_box.c_range)],
        "n_tau": n_tau, "n_c": n_c, "q": q, "placement": placement, "n_time": n_time,
        "phase_ratio": phase_ratio,
    }
    model = _empty_model(spec)
    thetas = unit_to_affine(param_box, model.grid.points)
    hashes = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        man_path = out / MANIFEST
        if man_path.exists():
            old = json.loads(man_path.read_text())
            if old.get("spec_hash") == config_hash(spec):
                hashes = dict(old["nodes"])
            else:
                logger.warning("surrogate directory %s holds a different model; retraining", out)
    t_start = time.perf_counter()
    n_solves = 0
    for it, tau in enumerate(model.tau_axis):
        for ic, cf in enumerate(model.c_axis):
            name = _node_file(it, ic)
            if out is not None and name in hashes and (out / name).exists():
                interp = SparseGridInterpolant.load(out / name)
                if interp.content_hash() == hashes[name]:
                    model.interpolants[it][ic] = interp
                    continue
            design = DesignPoint(float(tau), float(cf))
            values = np.empty((model.grid.n_nodes, 2 * n_time))
            for k, theta in enumerate(thetas):
                params = ModelParams.from_theta(theta, phase_ratio)
                try:
                    values[k] = solver_curves(params, design, solver_config, model.time_grid)
                except SolverError as exc:
                    raise SurrogateTrainingError(
                        f"solver failed at theta={theta}, d={design}: {exc}", theta, design) from exc
            n_solves += model.grid.n_nodes
            interp = SparseGridInterpolant.from_values(model.grid, values)
            model.interpolants[it][ic] = interp
            if out is not None:
                interp.save(out / name)
                hashes[name] = interp.content_hash()
                _write_manifest(out, spec, hashes, {})
            if progress is not None:
                progress(it, ic)
            logger.info("trained design node (%d, %d) tau=%.4g c=%.4g", it, ic, tau, cf)
    model.provenance = {
        "solver_hash": config_hash(spec["solver"]),
        "n_solves": n_solves,
        "total_solves": model.grid.n_nodes * n_tau * n_c,
        "train_seconds": time.perf_counter() - t_start,
        "trained_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(provenance or {}),
    }
    if out is not None:
        _write_manifest(out, spec, hashes, model.provenance)
    return model


def _blend_weights(axis: np.ndarray, v: float) -> list[tuple[int, float]]:
    """Linear interpolation stencil on a sorted axis (zero weights dropped)."""
    j = int(np.clip(np.searchsorted(axis, v, side="right") - 1, 0, axis.size - 2))
    t = (v - axis[j]) / (axis[j + 1] - axis[j])
    t = min(max(t, 0.0), 1.0)
    return [(idx, w) for idx, w in ((j, 1.0 - t), (j + 1, t)) if w != 0.0]


def design_stencil(model: SurrogateModel, d: DesignPoint) -> list[tuple[int, int, float]]:
    if not model.design_box.contains(d):
        raise DomainError(f"design {d} outside the design box")
    st = []
    for it, wt in _blend_weights(model.tau_axis, d.tau_inj):
        for ic, wc in _blend_weights(model.c_axis, d.c_feed):
            st.append((it, ic, wt * wc))
    return st


def _theta_array(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, ModelParams) else np.asarray(theta, dtype=float)


def eval_values(model: SurrogateModel, theta, d: DesignPoint) -> np.ndarray:
    """Blended interpolant output(s): ``(2 * n_time,)`` or ``(n, 2 * n_time)``."""
    x = affine_to_unit(model.param_box, _theta_array(theta))
    out = None
    for it, ic, w in design_stencil(model, d):
        v = model.interpolants[it][ic](x)
        out = w * v if out is None else out + w * v
    return out


def eval_curve(model: SurrogateModel, theta, d: DesignPoint) -> BreakthroughCurve:
    v = eval_values(model, theta, d)
    n = model.n_time
    return BreakthroughCurve(model.time_grid.copy(), v[:n], v[n:])


def eval_observation(model: SurrogateModel, theta, d: DesignPoint,
                     schedule: ObservationSchedule) -> Observation:
    """Surrogate observation vector; equals ``observe(eval_curve(...), schedule)``.

    Goes through a per-(design, schedule) :class:`ObservationOperator`
    cached on the model.
    """
    return Observation(operator(model, d, schedule)(theta))


def operator(model: SurrogateModel, d: DesignPoint,
             schedule: ObservationSchedule) -> "ObservationOperator":
    key = (d.tau_inj, d.c_feed, schedule.times)
    op = model._operators.get(key)
    if op is None:
        if len(model._operators) >= 256:
            model._operators.clear()
        op = model._operators[key] = ObservationOperator(model, d, schedule)
    return op


def _time_interp_matrix(time_grid: np.ndarray, times) -> np.ndarray:
    """Matrix ``P`` with ``P @ curve == np.interp(times, time_grid, curve)``."""
    times = np.asarray(times, dtype=float)
    P = np.zeros((times.size, time_grid.size))
    j = np.clip(np.searchsorted(time_grid, times, side="right") - 1, 0, time_grid.size - 2)
    t = (times - time_grid[j]) / (time_grid[j + 1] - time_grid[j])
    rows = np.arange(times.size)
    P[rows, j] = 1.0 - t
    P[rows, j + 1] += t
    return P


class ObservationOperator:
    """Fast ``theta -> G_N(theta; d)`` for one fixed design and schedule.

    Design blending and time sampling are linear, so they are folded into a
    single ``(n_nodes, K)`` surplus matrix once; each call then costs one
    basis evaluation and one small matrix product.
    """

    def __init__(self, model: SurrogateModel, d: DesignPoint, schedule: ObservationSchedule):
        P = _time_interp_matrix(model.time_grid, schedule.times)
        n = model.n_time
        W = np.zeros((model.grid.n_nodes, schedule.size))
        for it, ic, w in design_stencil(model, d):
            S = model.interpolants[it][ic].surplus
            W[:, : schedule.n_s] += w * (S[:, :n] @ P.T)
            W[:, schedule.n_s:] += w * (S[:, n:] @ P.T)
        self.model = model
        self.design = d
        self.schedule = schedule
        self.weights = W

    def __call__(self, theta) -> np.ndarray:
        x = affine_to_unit(self.model.param_box, _theta_array(theta))
        single = x.ndim == 1
        out = np.maximum(self.model.grid.basis(np.atleast_2d(x)) @ self.weights, 0.0)
        return out[0] if single else out


def validate(model: SurrogateModel, n_samples: int = 50, seed: int = 0,
             solver_config: SolverConfig | None = None, at_nodes: bool = False,
             schedule: ObservationSchedule | None = None, repeats: int = 20,
             lattice_designs: bool = False) -> dict:
    """Deviation of surrogate curves from solver curves at random ``(theta, d)``.

    ``at_nodes`` restricts draws to sparse-grid nodes and lattice designs;
    ``lattice_designs`` keeps random ``theta`` but draws lattice designs, which
    isolates the parameter-space interpolation error.
    Timings: ``mean_solver_seconds`` is one forward solve plus sampling on
    ``schedule``; ``mean_operator_build_seconds`` is the one-off cost of the
    observation operator at a new design; ``mean_observation_seconds`` is one
    surrogate observation at a design whose operator exists (mean over
    ``repeats`` calls).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = solver_config or model.solver_config
    schedule = schedule or ObservationSchedule.equidistant(15, upsilon=cfg.upsilon)
    rng = np.random.default_rng(seed)
    box, dbox = model.param_box, model.design_box
    errs = np.empty((n_samples, 2))
    sq = np.empty((n_samples, 2))
    t_solver = t_build = t_obs = 0.0
    draws = []
    for s in range(n_samples):
        if at_nodes:
            theta = unit_to_affine(box, model.grid.points[rng.integers(model.grid.n_nodes)])
            d = DesignPoint(float(model.tau_axis[rng.integers(model.tau_axis.size)]),
                            float(model.c_axis[rng.integers(model.c_axis.size)]))
        elif lattice_designs:
            theta = box.lo + box.width * rng.random(4)
            d = DesignPoint(float(model.tau_axis[rng.integers(model.tau_axis.size)]),
                            float(model.c_axis[rng.integers(model.c_axis.size)]))
        else:
            theta = box.lo + box.width * rng.random(4)
            d = DesignPoint(float(rng.uniform(*dbox.tau_range)), float(rng.uniform(*dbox.c_range)))
        params = ModelParams.from_theta(theta, model.phase_ratio)
        t0 = time.perf_counter()
        curve = solve_forward(params, d, cfg)
        observe(curve, schedule)
        t_solver += time.perf_counter() - t0
        ref = curve.resample(model.time_grid).ravel()
        approx = eval_values(model, theta, d)
        t0 = time.perf_counter()
        op = ObservationOperator(model, d, schedule)
        t_build += time.perf_counter() - t0
        t0 = time.perf_counter()
        for _ in range(repeats):
            op(theta)
        t_obs += (time.perf_counter() - t0) / repeats
        diff = np.abs(approx - ref).reshape(2, -1)
        errs[s] = diff.max(axis=1)
        sq[s] = (diff ** 2).mean(axis=1)
        draws.append({"theta": theta.tolist(), "tau_inj": d.tau_inj, "c_feed": d.c_feed,
                      "sup": float(diff.max())})
    return {
        "n_samples": n_samples,
        "seed": seed,
        "sup": float(errs.max()),
        "sup_c1": float(errs[:, 0].max()),
        "sup_c2": float(errs[:, 1].max()),
        "mean_sup_c1": float(errs[:, 0].mean()),
        "mean_sup_c2": float(errs[:, 1].mean()),
        "rms": float(np.sqrt(sq.mean())),
        "mean_solver_seconds": t_solver / n_samples,
        "mean_operator_build_seconds": t_build / n_samples,
        "mean_observation_seconds": t_obs / n_samples,
        "worst": max(draws, key=lambda r: r["sup"]),
    }
