"""Command-line driver: ``chrom-oed <command> --config run.toml``.

Commands
--------
simulate         dense outlet curve plus clean/noisy observations at one design
synth-data       noisy data sets for every configured ``N_s``
train-surrogate  sparse-grid surrogate on the design lattice plus validation report
utility-map      expected-information-gain map (solver, surrogate or both)
posterior        DRAM chain and summary at one design
bench            timing table, solver against surrogate

Every output file carries the hash of the resolved configuration (a ``#``
comment line in CSV files, a ``config_hash`` key in JSON files).  A command
whose stamp matches the current hash and whose outputs all exist is skipped
unless ``--force`` is given.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backends import SolverBackend, SurrogateBackend
from .edm_solver import SolverConfig, SolverError, observe, solve_forward
from .mcmc import DramConfig, DramError, chain_summary, dram_run, make_log_posterior, summary_to_json
from .model import DesignBox, DesignPoint, ModelParams, ObservationSchedule, ParamBox
from .oed import EigConfig, utility_map
from .sparse_grid import TrainingError
from .surrogate import (ObservationOperator, SurrogateModel, SurrogateTrainingError,
                        config_hash, train, validate)

logger = logging.getLogger("chrom_oed")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("simulate", "synth-data", "train-surrogate", "utility-map", "posterior", "bench")
BACKENDS = ("solver", "surrogate", "both")

# Full-scale defaults.  Desk-scale overrides live in configs/desk.toml.
DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "truth": {"theta": [0.05, 0.10, 10.0, 70.0], "phase_ratio": 1.5,
              "design": [1.525, 8.0]},
    "boxes": {"param_lower": [0.02, 0.03, 8.0, 50.0], "param_upper": [0.08, 0.17, 11.0, 180.0],
              "tau_range": [0.05, 3.0], "c_range": [1.0, 15.0]},
    "solver": {"n_cells": 400, "upsilon": 10.0, "eta": 1e-10, "cfl": 0.4,
               "diff_safety": 0.8, "grid": "cell"},
    "observation": {"n_s": [8, 15, 20], "sigma": 0.05, "t_first": 0.5, "t_last": 9.5},
    "surrogate": {"n_tau": 14, "n_c": 14, "q": 9, "placement": "equidistant",
                  "n_time": 512, "dir": "surrogate", "validate_samples": 50},
    "eig": {"M": 10000, "n_s": 15, "n_tau": 14, "n_c": 14, "common_random_numbers": True},
    "dram": {"n_iter": 80000, "burn_in": 30000, "adapt_interval": 100, "adapt_start": 1000,
             "dr_scale": 0.2, "eps": 1e-10, "n_s": 20, "data_backend": "solver"},
    "bench": {"n_solves": 10, "n_evals": 1000, "chain_iter": 5000},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    """Resolved run configuration; ``raw`` is the merged TOML document."""

    raw: dict
    out_dir: Path
    seed: int
    truth: ModelParams
    design: DesignPoint
    param_box: ParamBox
    design_box: DesignBox
    solver: SolverConfig
    sigma: float
    n_s_list: tuple

    @classmethod
    def from_dict(cls, doc: dict, out_dir=None) -> "RunConfig":
        raw = _merge(DEFAULTS, doc)
        if out_dir is not None:
            raw["out_dir"] = str(out_dir)
        try:
            b = raw["boxes"]
            pbox = ParamBox(tuple(b["param_lower"]), tuple(b["param_upper"]))
            dbox = DesignBox(tuple(b["tau_range"]), tuple(b["c_range"]))
            t = raw["truth"]
            truth = ModelParams.from_theta(np.asarray(t["theta"], dtype=float), t["phase_ratio"])
            design = DesignPoint(float(t["design"][0]), float(t["design"][1]))
            s = raw["solver"]
            solver = SolverConfig(n_cells=int(s["n_cells"]), upsilon=float(s["upsilon"]),
                                  eta=float(s["eta"]), cfl=float(s["cfl"]),
                                  diff_safety=float(s["diff_safety"]), grid=s["grid"])
        except (ValueError, TypeError, IndexError) as exc:
            raise ConfigError(str(exc)) from exc
        if not pbox.contains(truth.theta):
            raise ConfigError("true theta lies outside the parameter box")
        if not design.tau_inj < solver.upsilon:
            raise ConfigError("injection time must be shorter than the horizon")
        obs = raw["observation"]
        if not obs["sigma"] >= 0:
            raise ConfigError("observation.sigma must be >= 0")
        if not 0 < obs["t_first"] < obs["t_last"] < solver.upsilon:
            raise ConfigError("observation window must lie inside (0, upsilon)")
        n_s_list = tuple(int(n) for n in obs["n_s"])
        if not n_s_list or min(n_s_list) < 2:
            raise ConfigError("observation.n_s needs values >= 2")
        if raw["dram"]["data_backend"] not in ("solver", "surrogate"):
            raise ConfigError("dram.data_backend must be 'solver' or 'surrogate'")
        return cls(raw, Path(raw["out_dir"]), int(raw["seed"]), truth, design, pbox, dbox,
                   solver, float(obs["sigma"]), n_s_list)

    @classmethod
    def load(cls, path=None, out_dir=None) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, out_dir)
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
        return cls.from_dict(doc, out_dir)

    @property
    def hash(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k != "out_dir"}
        return config_hash(doc)

    def schedule(self, n_s: int) -> ObservationSchedule:
        """Equidistant schedule; the likelihood needs ``sigma > 0``."""
        obs = self.raw["observation"]
        times = np.linspace(obs["t_first"], obs["t_last"], n_s)
        sigma = self.sigma if self.sigma > 0 else 1.0
        return ObservationSchedule(tuple(times), sigma, self.solver.upsilon)

    @property
    def surrogate_dir(self) -> Path:
        return self.out_dir / self.raw["surrogate"]["dir"]

    def dram_config(self, seed: int | None = None, **kw) -> DramConfig:
        d = self.raw["dram"]
        args = {"n_iter": int(d["n_iter"]), "burn_in": int(d["burn_in"]),
                "adapt_interval": int(d["adapt_interval"]), "adapt_start": int(d["adapt_start"]),
                "dr_scale": float(d["dr_scale"]), "eps": float(d["eps"]),
                "seed": self.seed if seed is None else seed}
        args.update(kw)
        try:
            return DramConfig.for_box(self.param_box, **args)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# -- output helpers ---------------------------------------------------------

def _comment(cfg: RunConfig) -> str:
    return f"config_hash={cfg.hash}"


def _write_rows(path: Path, cfg: RunConfig, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_comment(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row])
    return path


def _write_json(path: Path, cfg: RunConfig, payload: dict) -> Path:
    payload = {"config_hash": cfg.hash, **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=float)
    return path


def _stamp_path(cfg: RunConfig, key: str) -> Path:
    return cfg.out_dir / ".stamps" / f"{key}.json"


def _up_to_date(cfg: RunConfig, key: str) -> bool:
    p = _stamp_path(cfg, key)
    if not p.exists():
        return False
    stamp = json.loads(p.read_text())
    return stamp.get("config_hash") == cfg.hash and all(Path(f).exists() for f in stamp["files"])


def _stamp(cfg: RunConfig, key: str, files) -> None:
    p = _stamp_path(cfg, key)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps({"config_hash": cfg.hash, "files": [str(f) for f in files]}, indent=2))


def _noise(cfg: RunConfig, tag: str, shape) -> np.ndarray:
    """Standard-normal draws keyed by the run seed and a fixed tag."""
    ss = np.random.SeedSequence([cfg.seed, *tag.encode()])
    return np.random.default_rng(ss).standard_normal(shape)


def _curve_rows(curve):
    return zip(curve.times, curve.c1_out, curve.c2_out)


def _load_surrogate(cfg: RunConfig) -> SurrogateModel:
    path = cfg.surrogate_dir
    if not (path / "manifest.json").exists():
        raise ConfigError(f"no trained surrogate at {path}; run train-surrogate first")
    model = SurrogateModel.load(path)
    if model.provenance.get("config_hash") not in (None, cfg.hash):
        logger.warning("surrogate at %s was trained under a different configuration", path)
    return model


def _backends(cfg: RunConfig, which: str) -> list:
    out = []
    if which in ("solver", "both"):
        out.append(SolverBackend(cfg.solver, cfg.truth.f))
    if which in ("surrogate", "both"):
        out.append(SurrogateBackend(_load_surrogate(cfg)))
    return out


# -- commands ---------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, theta=None, design: DesignPoint | None = None) -> list[Path]:
    """Dense curve plus clean and noisy observations for every configured ``N_s``."""
    params = cfg.truth if theta is None else ModelParams.from_theta(theta, cfg.truth.f)
    d = design or cfg.design
    curve = solve_forward(params, d, cfg.solver)
    out = cfg.out_dir / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    files = [_write_rows(out / "curve.csv", cfg, ["tau", "c1_out", "c2_out"], _curve_rows(curve))]
    for n_s in cfg.n_s_list:
        sched = cfg.schedule(n_s)
        clean = observe(curve, sched).values
        noisy = clean + cfg.sigma * _noise(cfg, f"simulate/{n_s}", clean.shape)
        rows = zip(sched.times, clean[:n_s], clean[n_s:], noisy[:n_s], noisy[n_s:])
        files.append(_write_rows(out / f"observations_ns{n_s}.csv", cfg,
                                 ["tau", "c1_clean", "c2_clean", "c1_obs", "c2_obs"], rows))
    return files


def cmd_synth_data(cfg: RunConfig) -> list[Path]:
    """Noisy data for each ``N_s``; noise seeds are recorded in ``synth_data.json``."""
    curve = solve_forward(cfg.truth, cfg.design, cfg.solver)
    out = cfg.out_dir / "synth-data"
    out.mkdir(parents=True, exist_ok=True)
    files, seeds = [], {}
    for n_s in cfg.n_s_list:
        files.append(_write_rows(out / f"curve_ns{n_s}.csv", cfg, ["tau", "c1_out", "c2_out"],
                                 _curve_rows(curve)))
        sched = cfg.schedule(n_s)
        tag = f"synth/{n_s}"
        values = observe(curve, sched).values
        if cfg.sigma > 0:
            values = values + cfg.sigma * _noise(cfg, tag, values.shape)
        files.append(_write_rows(out / f"data_ns{n_s}.csv", cfg, ["tau", "c1", "c2"],
                                 zip(sched.times, values[:n_s], values[n_s:])))
        seeds[str(n_s)] = {"seed": cfg.seed, "tag": tag}
    files.append(_write_json(out / "synth_data.json", cfg, {
        "theta": cfg.truth.theta.tolist(), "design": [cfg.design.tau_inj, cfg.design.c_feed],
        "sigma": cfg.sigma, "noise_streams": seeds}))
    return files


def read_data(path) -> np.ndarray:
    """Observation vector (``c1`` block then ``c2`` block) from a ``data_ns*.csv`` file."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    return np.concatenate([data[:, 1], data[:, 2]])


def cmd_train_surrogate(cfg: RunConfig) -> list[Path]:
    s = cfg.raw["surrogate"]
    path = cfg.surrogate_dir
    t0 = time.perf_counter()

    def progress(it, ic):
        logger.info("design node (%d, %d) done after %.1f s", it, ic, time.perf_counter() - t0)

    model = train(cfg.solver, cfg.param_box, cfg.design_box, int(s["n_tau"]), int(s["n_c"]),
                  int(s["q"]), s["placement"], int(s["n_time"]), cfg.truth.f, out_dir=path,
                  progress=progress, provenance={"config_hash": cfg.hash})
    report = validate(model, int(s["validate_samples"]), cfg.seed)
    report["speedup"] = report["mean_solver_seconds"] / max(report["mean_observation_seconds"], 1e-12)
    report["n_nodes"] = model.grid.n_nodes
    report["provenance"] = model.provenance
    return [path / "manifest.json", _write_json(path / "validation.json", cfg, report)]


def _eig_config(cfg: RunConfig) -> EigConfig:
    e = cfg.raw["eig"]
    if not cfg.sigma > 0:
        raise ConfigError("utility maps need observation.sigma > 0")
    return EigConfig(M=int(e["M"]), seed=cfg.seed, schedule=cfg.schedule(int(e["n_s"])),
                     common_random_numbers=bool(e["common_random_numbers"]))


def cmd_utility_map(cfg: RunConfig, backend: str = "surrogate") -> list[Path]:
    e = cfg.raw["eig"]
    tau_axis, c_axis = cfg.design_box.lattice(int(e["n_tau"]), int(e["n_c"]))
    ecfg = _eig_config(cfg)
    out = cfg.out_dir / "utility-map"
    out.mkdir(parents=True, exist_ok=True)
    files, maps = [], {}
    for be in _backends(cfg, backend):
        t0 = time.perf_counter()
        umap = utility_map(tau_axis, c_axis, ecfg, cfg.param_box, be)
        logger.info("%s utility map done in %.1f s", be.name, time.perf_counter() - t0)
        maps[be.name] = umap
        files.append(_write_rows(out / f"utility_{be.name}.csv", cfg,
                                 ["tau_inj", "c_feed", "U", "stderr_proxy"], umap.rows()))
        files.append(_write_json(out / f"utility_{be.name}.json", cfg, umap.summary()))
    if len(maps) == 2:
        a, b = maps["solver"], maps["surrogate"]
        se = np.sqrt(a.stderr ** 2 + b.stderr ** 2)
        rows = [(t, c, a.U[i, j], b.U[i, j], abs(a.U[i, j] - b.U[i, j]), se[i, j])
                for i, t in enumerate(tau_axis) for j, c in enumerate(c_axis)]
        files.append(_write_rows(out / "utility_diff.csv", cfg,
                                 ["tau_inj", "c_feed", "U_solver", "U_surrogate", "abs_diff",
                                  "combined_stderr"], rows))
    return files


def cmd_posterior(cfg: RunConfig, backend: str = "surrogate",
                  design: DesignPoint | None = None) -> list[Path]:
    """DRAM at ``design`` on data generated from the true parameters."""
    if not cfg.sigma > 0:
        raise ConfigError("posterior sampling needs observation.sigma > 0")
    d = design or cfg.design
    n_s = int(cfg.raw["dram"]["n_s"])
    sched = cfg.schedule(n_s)
    data_be = _backends(cfg, cfg.raw["dram"]["data_backend"])[0]
    clean = data_be.observation_fn(d, sched)(cfg.truth.theta)
    y = clean + cfg.sigma * _noise(cfg, f"posterior/{n_s}", clean.shape)
    out = cfg.out_dir / "posterior"
    out.mkdir(parents=True, exist_ok=True)
    files = [_write_rows(out / "data.csv", cfg, ["tau", "c1", "c2"],
                         zip(sched.times, y[:n_s], y[n_s:]))]
    for be in _backends(cfg, backend):
        target = make_log_posterior(y, sched, d, be, cfg.param_box)
        t0 = time.perf_counter()
        chain = dram_run(cfg.dram_config(), target)
        seconds = time.perf_counter() - t0
        path = out / f"chain_{be.name}.csv"
        chain.to_csv(path, header_comment=_comment(cfg))
        summary = chain_summary(chain)
        summary["_design"] = {"tau_inj": d.tau_inj, "c_feed": d.c_feed}
        summary["_seconds"] = seconds
        summary["config_hash"] = cfg.hash
        jpath = out / f"posterior_{be.name}.json"
        summary_to_json(summary, jpath)
        files += [path, jpath]
        logger.info("%s chain: acceptance %.3f in %.1f s", be.name, chain.acceptance_rate, seconds)
    return files


def cmd_bench(cfg: RunConfig) -> list[Path]:
    """Mean forward-solve and surrogate times, per-node EIG time and chain time.

    Solver EIG and chain times are extrapolated from the mean solve time;
    surrogate times are measured.
    """
    b = cfg.raw["bench"]
    model = _load_surrogate(cfg)
    rng = np.random.default_rng(cfg.seed)
    sched = cfg.schedule(int(cfg.raw["eig"]["n_s"]))
    thetas = cfg.param_box.lo + cfg.param_box.width * rng.random((int(b["n_solves"]), 4))
    d = cfg.design
    solve_forward(cfg.truth, d, cfg.solver)  # compile outside the timed loop
    t0 = time.perf_counter()
    for th in thetas:
        observe(solve_forward(ModelParams.from_theta(th, cfg.truth.f), d, cfg.solver), sched)
    t_solve = (time.perf_counter() - t0) / len(thetas)

    op = ObservationOperator(model, d, sched)
    evals = cfg.param_box.lo + cfg.param_box.width * rng.random((int(b["n_evals"]), 4))
    t0 = time.perf_counter()
    for th in evals:
        op(th)
    t_surr = (time.perf_counter() - t0) / len(evals)

    ecfg = _eig_config(cfg)
    t0 = time.perf_counter()
    utility_map([d.tau_inj], [d.c_feed], ecfg, cfg.param_box, SurrogateBackend(model))
    t_eig = time.perf_counter() - t0

    n_iter = int(cfg.raw["dram"]["n_iter"])
    short = int(b["chain_iter"])
    y = op(cfg.truth.theta)
    target = make_log_posterior(y, sched, d, SurrogateBackend(model), cfg.param_box)
    t0 = time.perf_counter()
    dram_run(cfg.dram_config(n_iter=short, burn_in=0), target)
    t_chain = (time.perf_counter() - t0) * n_iter / short

    # DRAM evaluates the target at most twice per iteration; about 1.5 is typical
    rows = [
        ("forward_eval", t_solve, t_surr, "measured", "measured"),
        ("utility_node", ecfg.M * t_solve, t_eig, "extrapolated", "measured"),
        ("chain", 1.5 * n_iter * t_solve, t_chain, "extrapolated", "extrapolated"),
    ]
    out = cfg.out_dir / "bench"
    out.mkdir(parents=True, exist_ok=True)
    csv_path = _write_rows(out / "bench.csv", cfg,
                           ["quantity", "solver_seconds", "surrogate_seconds", "solver_method",
                            "surrogate_method"], rows)
    json_path = _write_json(out / "bench.json", cfg, {
        "mean_solve_seconds": t_solve, "mean_surrogate_seconds": t_surr,
        "speedup": t_solve / t_surr, "eig_node_seconds": t_eig,
        "chain_seconds": t_chain, "M": ecfg.M, "n_iter": n_iter})
    logger.info("solve %.3g s, surrogate %.3g s, speedup %.0f", t_solve, t_surr, t_solve / t_surr)
    return [csv_path, json_path]


def run(command: str, cfg: RunConfig, backend: str = "surrogate", force: bool = False) -> list[Path]:
    """Dispatch ``command``; returns the written files (empty when up to date)."""
    key = command if command not in ("utility-map", "posterior") else f"{command}-{backend}"
    if not force and _up_to_date(cfg, key):
        logger.info("%s is up to date (config %s); use --force to rerun", command, cfg.hash[:12])
        return []
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if command == "simulate":
        files = cmd_simulate(cfg)
    elif command == "synth-data":
        files = cmd_synth_data(cfg)
    elif command == "train-surrogate":
        files = cmd_train_surrogate(cfg)
    elif command == "utility-map":
        files = cmd_utility_map(cfg, backend)
    elif command == "posterior":
        files = cmd_posterior(cfg, backend)
    elif command == "bench":
        files = cmd_bench(cfg)
    else:
        raise ConfigError(f"unknown command {command}")
    _stamp(cfg, key, files)
    return files


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chrom-oed",
                                description="Bayesian design of chromatography experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--backend", choices=BACKENDS, default="surrogate")
    p.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.out)
        files = run(args.command, cfg, args.backend, args.force)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, SurrogateTrainingError, TrainingError, DramError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if files:
        for f in files:
            print(f)
    else:
        print(f"{args.command}: up to date")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
