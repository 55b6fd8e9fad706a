"""
Batch front end: one JSON experiment config in, one artifact directory out.

Every run writes the mean-field curve, the criteria report, the aggregated
statistics and the plot-data CSVs of its experiment, then a manifest with the
resolved config, per-stage stream tags, wall times and output checksums.
Statistical outputs carry no timestamps, so a replay of the manifest produces
byte-identical files whatever the worker count.
"""
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import CFG, TOOL_VERSION
from criteria import (CriteriaError, coming_down_check, criteria_scan, explosion_probability,
                      martingale_Za_check)
from functionals import parse_functional
from model import (ModelError, ModelSpec, NumericsSpec, QuadratureError, model_from_dict, numerics_from_dict,
                   validate_model)
from population import (Caps, PopulationError, birth_death_pmf, many_to_one_check, sample_N, sample_population,
                        simulate_population, survival_fraction_stats, trend_test)
from presets import EXPERIMENTS, PRESET_MODELS, pin, preset_model
from spinal import MeanFieldCurve, SpinalError, SpinalVariant, simulate_spinal, solve_mean_field
from store import StoreError, checksum, dumps, read_json, write_csv, write_json
from streams import DriverStream, tag_key

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CAPPED = 3

MANIFEST = "manifest.json"
TREND_ALPHA = 0.01
# experiments that also write a labelled population replicate and a spinal path
TRACE_EXPERIMENTS = ("regime-subcritical", "regime-supercritical", "regime-explosive", "no-reservoir-explosive",
                     "no-reservoir-extinction", "many-to-one-suite")

# experiment-specific parameters and their defaults
PARAM_DEFAULTS = {
    "functionals": ["1", "ge:0.3", "ge:0.7"],
    "a": 0.5,
    "corridor": [1e-3, 1e3],
    "a_values": [0.25, 0.5, 0.75, 1.5, 2.0, 3.0],
    "eta": 0.5,
    "x_list": [1e3, 1e6, 1e9],
    "b_frak": 20.0,
    "delta": 0.5,
    "epsilon": 0.1,
    "pmf_samples": 100000,
}
_CONFIG_KEYS = {"experiment", "preset", "model", "numerics", "ks", "ts", "params", "output"}


class ExperimentError(Exception):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    model: ModelSpec
    numerics: NumericsSpec
    ks: list = field(default_factory=lambda: [10.0, 100.0])
    ts: list = field(default_factory=lambda: [1.0])
    params: dict = field(default_factory=dict)
    output: str | None = None
    preset: str | None = None

    def param(self, key):
        return self.params.get(key, PARAM_DEFAULTS[key])

    def as_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "preset": self.preset,
            "model": self.model.as_dict(),
            "numerics": self.numerics.as_dict(),
            "ks": list(self.ks),
            "ts": list(self.ts),
            "params": dict(sorted(self.params.items())),
        }

    def config_hash(self) -> str:
        return hashlib.sha256(dumps(self.as_dict()).encode("utf-8")).hexdigest()


def _float_list(values, name: str) -> list:
    try:
        out = [float(v) for v in values]
    except (TypeError, ValueError) as e:
        raise ExperimentError(f"'{name}' must be a list of numbers, got {values!r}") from e
    if not out or any(not math.isfinite(v) or v < 0 for v in out):
        raise ExperimentError(f"'{name}' must be a non-empty list of finite non-negative numbers")
    return out


def config_from_dict(data: dict, *, seed: int | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ExperimentError("experiment config must be a JSON object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ExperimentError(f"unknown config key(s) {sorted(unknown)}")
    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ExperimentError(f"'experiment' must be one of {sorted(EXPERIMENTS)}, got {experiment!r}")
    preset = data.get("preset")
    try:
        if preset is not None:
            if preset not in PRESET_MODELS:
                raise ExperimentError(f"unknown preset '{preset}' (known: {', '.join(sorted(PRESET_MODELS))})")
            model = preset_model(preset, data.get("model"))
        elif "model" in data:
            model = model_from_dict(data["model"])
        else:
            preset = EXPERIMENTS[experiment][0]
            model = preset_model(preset)
        numerics = numerics_from_dict(data.get("numerics"))
    except ModelError as e:
        raise ExperimentError(f"invalid model: {e}") from e
    if seed is not None:
        numerics = numerics.with_(master_seed=int(seed))
    params = dict(data.get("params") or {})
    bad = set(params) - set(PARAM_DEFAULTS)
    if bad:
        raise ExperimentError(f"unknown experiment parameter(s) {sorted(bad)}")
    for tag in params.get("functionals", []):
        try:
            parse_functional(tag)
        except ValueError as e:
            raise ExperimentError(str(e)) from e
    return ExperimentConfig(
        experiment=experiment,
        model=model,
        numerics=numerics,
        ks=_float_list(data.get("ks", [10.0, 100.0]), "ks"),
        ts=_float_list(data.get("ts", [numerics.T]), "ts"),
        params=params,
        output=data.get("output"),
        preset=preset,
    )


def load_config(path, *, seed: int | None = None) -> ExperimentConfig:
    try:
        data = read_json(path)
    except StoreError as e:
        raise ExperimentError(str(e)) from e
    return config_from_dict(data, seed=seed)


def check_config(cfg: ExperimentConfig):
    """Model validation and preset pinning; raises ExperimentError naming the violated clauses."""
    report = validate_model(cfg.model)
    if not report.passed:
        raise ExperimentError(f"model violates the existence assumptions: {report.summary()}")
    violations = pin(cfg.experiment, cfg.model)
    if violations:
        raise ExperimentError(f"{cfg.experiment}: " + "; ".join(violations))


@dataclass
class RunOutcome:
    directory: Path
    manifest: dict
    capped: bool = False

    @property
    def exit_code(self) -> int:
        return EXIT_CAPPED if self.capped else EXIT_OK


class _Run:
    """State of one run: output directory, stage log and the files written so far."""

    def __init__(self, cfg: ExperimentConfig, out: Path, workers: int | None):
        self.cfg = cfg
        self.num = cfg.numerics
        self.out = out
        self.workers = workers
        self.stages = []
        self.streams = {}
        self.files = []
        self.capped = False
        self.stats = {"experiment": cfg.experiment}
        self._stage = None

    def stream(self, tag: str) -> DriverStream:
        full = f"{self.cfg.experiment}/{tag}"
        self.streams[full] = {"tag": full, "key": tag_key(full), "stage": self._stage}
        return DriverStream(self.num.master_seed, full)

    def stage(self, name: str, fn):
        start = time.perf_counter()
        self._stage = name
        log.info("stage %s: start", name)
        result = fn()
        wall = time.perf_counter() - start
        self.stages.append({"name": name, "wall_time": wall})
        log.info("stage %s: done in %.2fs", name, wall)
        return result

    def csv(self, name: str, header, rows):
        self.files.append(write_csv(self.out / name, header, rows).name)

    def json(self, name: str, payload):
        self.files.append(write_json(self.out / name, payload).name)

    @property
    def common(self) -> dict:
        return {"dt": self.num.dt, "x_explode": self.num.x_explode, "block_size": self.num.block_size,
                "workers": self.workers}


def _grid(num: NumericsSpec, T: float) -> np.ndarray:
    n = max(1, int(round(T / num.mf_grid_step)))
    return np.linspace(0.0, T, n + 1)


def _mean_field(run: _Run, T: float) -> MeanFieldCurve:
    model, num = run.cfg.model, run.num
    grid = _grid(num, T)
    curve = solve_mean_field(model, model.x0, T, grid, num.tol_fp, num.k_max_fp, max(num.replicates, 1000),
                             run.stream("mean-field"), **run.common)
    curve.to_csv(run.out / "mean_field.csv")
    run.files.append("mean_field.csv")
    run.stats["mean_field"] = {"converged": curve.converged, "iterations": curve.iterations,
                               "residual": curve.residual, "note": curve.note, "tolerance": num.tol_fp}
    return curve


def _criteria(run: _Run):
    rep = criteria_scan(run.cfg.model, a_values=run.cfg.param("a_values"), eta=run.cfg.param("eta"),
                        quad_tol=run.num.quad_tol)
    rep.to_json(run.out / "criteria.json")
    rep.to_csv(run.out / "criteria_grid.csv")
    run.files += ["criteria.json", "criteria_grid.csv"]
    return rep


def _trend(estimates) -> dict | None:
    # one point has no trend
    if len(estimates) < 2:
        return None
    return trend_test(estimates, "decreasing", TREND_ALPHA).as_dict()


def _fraction_vs_k(run: _Run, mf):
    cfg = run.cfg
    t = cfg.ts[-1]
    st = survival_fraction_stats(cfg.model, cfg.model.x0, mf, t, cfg.ks, run.num.replicates,
                                 run.stream("population"), indicators=("ge",), max_cells=run.num.max_cells,
                                 **run.common)
    run.capped |= st.capped > 0
    run.csv("fraction_vs_k.csv", ["t", "indicator", "K", "estimate", "se", "replicates"], st.rows())
    k_fit = 10.0 if 10.0 in st.ks else None
    k_check = 100.0 if 100.0 in st.ks else None
    env = st.envelope("ge", k_fit, k_check)
    trend = _trend([st.estimate("ge", K) for K in st.ks])
    run.stats.update({"survival": st.as_dict(), "envelope": env.as_dict(), "trend_in_K": trend})


def _fraction_vs_t(run: _Run, mf, indicator: str, level: float):
    cfg = run.cfg
    st = survival_fraction_stats(cfg.model, cfg.model.x0, mf, cfg.ts, [level], run.num.replicates,
                                 run.stream("population"), indicators=(indicator,), max_cells=run.num.max_cells,
                                 **run.common)
    run.capped |= st.capped > 0
    run.csv("fraction_vs_t.csv", ["t", "indicator", "K", "estimate", "se", "replicates"], st.rows())
    key_level = 0.0 if indicator == "finite" else level
    trend = _trend([st.estimate(indicator, key_level, t) for t in st.times])
    run.stats.update({"survival": st.as_dict(), "trend_in_t": trend})


def _traces(run: _Run, mf):
    """One labelled population replicate and one spinal path, with their event logs."""
    cfg = run.cfg
    T = max(cfg.ts)
    pop = simulate_population(cfg.model, cfg.model.x0, T, mf, run.stream("population-trace"),
                              Caps(int(run.num.max_cells)), snapshot_times=[0.0] + list(cfg.ts), dt=run.num.dt,
                              x_explode=run.num.x_explode)
    run.capped |= pop.capped
    run.files.append(pop.snapshots_to_csv(run.out / "population_snapshots.csv").name)
    run.files.append(pop.events_to_csv(run.out / "population_events.csv").name)
    spine = simulate_spinal(SpinalVariant("Y"), cfg.model.x0, T, mf, cfg.model, run.stream("spinal-trace"),
                            dt=run.num.dt, x_explode=run.num.x_explode)
    run.files.append(spine.to_csv(run.out / "spinal_path.csv").name)
    run.files.append(spine.events_to_csv(run.out / "spinal_events.csv").name)
    run.stats["traces"] = {"T": T, "cells": pop.final().size, "population_events": len(pop.events),
                           "capped": pop.capped, "spinal_events": len(spine.events),
                           "spinal_explosion_time": spine.explosion_time}


def _pmf_comparison(run: _Run, mf):
    model = run.cfg.model
    b, d, t = model.b, model.d, run.cfg.ts[-1]
    if b == d or t <= 0:
        return
    n_draw = int(run.cfg.param("pmf_samples"))
    exact_draws = sample_N(b, d, t, run.stream("sample-N"), size=n_draw)
    sample = sample_population(model, 1.0, mf, [t], [], run.num.replicates, run.stream("pmf-population"),
                               max_cells=run.num.max_cells, **run.common)
    run.capped |= sample.capped > 0
    sim = sample.n_cells[0][np.isfinite(sample.n_cells[0])].astype(np.int64)
    top = int(max(exact_draws.max(initial=0), sim.max(initial=0)))
    rows, tv_exact, tv_sim = [], 0.0, 0.0
    exact_counts = np.bincount(exact_draws, minlength=top + 1)
    sim_counts = np.bincount(sim, minlength=top + 1)
    for n in range(top + 1):
        p = birth_death_pmf(b, d, t, n)
        pe = exact_counts[n] / exact_draws.size
        ps = sim_counts[n] / max(sim.size, 1)
        tv_exact += abs(pe - p)
        tv_sim += abs(ps - p)
        rows.append((n, p, float(pe), float(ps)))
    tail = 1.0 - sum(r[1] for r in rows)
    run.csv("pmf_comparison.csv", ["n", "pmf", "sample_N", "population"], rows)
    run.stats["pmf"] = {"t": t, "tv_sample_N": 0.5 * (tv_exact + tail), "tv_population": 0.5 * (tv_sim + tail),
                        "samples": int(exact_draws.size), "replicates": int(sim.size)}


def _many_to_one(run: _Run, mf):
    cfg = run.cfg
    t = cfg.ts[-1]
    rows = []
    for i, F in enumerate(cfg.param("functionals")):
        res = many_to_one_check(F, t, cfg.model, cfg.model.x0, mf, run.num.replicates, run.num.replicates,
                                run.stream(f"many-to-one/{i}"), **run.common)
        rows.append(res.as_dict())
    run.csv("many_to_one.csv", ["functional", "t", "lhs", "se_lhs", "rhs", "se_rhs", "z"],
            ((r["functional"], r["t"], r["lhs"], r["se_lhs"], r["rhs"], r["se_rhs"], r["z"]) for r in rows))
    run.stats["many_to_one"] = rows


def _martingale(run: _Run, mf):
    cfg = run.cfg
    c, b_high = cfg.param("corridor")
    res = martingale_Za_check(float(cfg.param("a")), float(c), float(b_high), [0.0] + list(cfg.ts), cfg.model,
                              cfg.model.x0, mf, run.num.replicates, run.stream("martingale"), dt=run.num.dt,
                              x_explode=run.num.x_explode, quad_tol=run.num.quad_tol)
    res.to_csv(run.out / "martingale_drift.csv")
    run.files.append("martingale_drift.csv")
    run.stats["martingale"] = res.as_dict()


def _explosion(run: _Run, mf):
    cfg = run.cfg
    p, se = explosion_probability(cfg.model, cfg.model.x0, cfg.ts[-1], max(run.num.replicates, 1000),
                                  run.stream("explosion"), mf=mf, dt=run.num.dt, x_explode=run.num.x_explode)
    run.stats["explosion"] = {"estimate": p, "se": se, "T": cfg.ts[-1], "x_explode": run.num.x_explode}


def _coming_down(run: _Run):
    cfg = run.cfg
    res = coming_down_check(cfg.model, cfg.param("x_list"), float(cfg.param("b_frak")), float(cfg.param("delta")),
                            float(cfg.param("eta")), float(cfg.param("a")), run.num.replicates,
                            run.stream("coming-down"), dt=run.num.dt, x_explode=run.num.x_explode)
    run.stats["coming_down"] = res.as_dict()


def _execute(run: _Run):
    cfg = run.cfg
    exp = cfg.experiment
    T = max(cfg.ts)
    mf = run.stage("mean-field", lambda: _mean_field(run, T)) if T > 0 else None
    rep = run.stage("criteria", lambda: _criteria(run))
    run.stats["criteria_verdict"] = {"verdict": rep.verdict, "a": rep.a, "marker": rep.marker}
    if exp == "regime-subcritical":
        run.stage("fraction-vs-k", lambda: _fraction_vs_k(run, mf))
    elif exp == "regime-supercritical":
        run.stage("fraction-vs-t", lambda: _fraction_vs_t(run, mf, "sup_le", cfg.ks[0]))
    elif exp in ("regime-explosive", "no-reservoir-explosive"):
        run.stage("fraction-vs-t", lambda: _fraction_vs_t(run, mf, "finite", 0.0))
        run.stage("explosion", lambda: _explosion(run, mf))
    elif exp == "no-reservoir-extinction":
        run.stage("fraction-vs-t", lambda: _fraction_vs_t(run, mf, "gt", float(cfg.param("epsilon"))))
    elif exp == "coming-down":
        run.stage("coming-down", lambda: _coming_down(run))
    elif exp == "many-to-one-suite":
        run.stage("many-to-one", lambda: _many_to_one(run, mf))
        run.stage("pmf", lambda: _pmf_comparison(run, mf))
    elif exp == "martingale-suite":
        run.stage("martingale", lambda: _martingale(run, mf))
    if exp in TRACE_EXPERIMENTS and T > 0:
        run.stage("traces", lambda: _traces(run, mf))
    run.json("stats.json", run.stats)


def run(cfg: ExperimentConfig | str | Path, out=None, *, workers: int | None = None,
        seed: int | None = None) -> RunOutcome:
    """Validate, simulate and write the artifact directory of one experiment."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg, seed=seed)
    elif seed is not None:
        cfg.numerics = cfg.numerics.with_(master_seed=int(seed))
    check_config(cfg)
    out = Path(out or cfg.output or CFG.output_path / f"{cfg.experiment}-{cfg.config_hash()[:12]}")
    out.mkdir(parents=True, exist_ok=True)
    r = _Run(cfg, out, workers)
    log.info("running %s into %s (seed %d)", cfg.experiment, out, cfg.numerics.master_seed)
    try:
        _execute(r)
    except StoreError as e:
        raise ExperimentError(f"could not write outputs: {e}") from e
    except (ModelError, QuadratureError, PopulationError, SpinalError, CriteriaError) as e:
        raise ExperimentError(f"{cfg.experiment}: {e}") from e
    manifest = {
        "tool_version": TOOL_VERSION,
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.numerics.master_seed,
        "config": cfg.as_dict(),
        "stages": r.stages,
        "streams": sorted(r.streams.values(), key=lambda s: s["tag"]),
        "capped": r.capped,
        "outputs": [{"file": f, "sha256": checksum(out / f)} for f in sorted(set(r.files))],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    write_json(out / MANIFEST, manifest)
    if r.capped:
        log.warning("population cap hit: outputs of %s are partial", out)
    return RunOutcome(out, manifest, r.capped)


@dataclass
class ReplayOutcome:
    outcome: RunOutcome
    identical: bool
    mismatches: list

    @property
    def exit_code(self) -> int:
        return self.outcome.exit_code


def replay(manifest_path, out=None, *, workers: int | None = None) -> ReplayOutcome:
    """Re-run the config embedded in a manifest and compare output checksums."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    try:
        manifest = read_json(manifest_path)
    except StoreError as e:
        raise ExperimentError(str(e)) from e
    version = manifest.get("tool_version")
    if version != TOOL_VERSION:
        raise ExperimentError(f"manifest written by version {version}, this is version {TOOL_VERSION}; refusing to replay")
    try:
        data = dict(manifest["config"])
        seed = int(manifest["master_seed"])
        recorded = {o["file"]: o["sha256"] for o in manifest["outputs"]}
    except (KeyError, TypeError, ValueError) as e:
        raise ExperimentError(f"{manifest_path}: incomplete manifest ({e})") from e
    preset = data.pop("preset", None)
    cfg = config_from_dict(data, seed=seed)
    cfg.preset = preset
    out = Path(out) if out else manifest_path.parent.with_name(manifest_path.parent.name + "-replay")
    outcome = run(cfg, out, workers=workers)
    fresh = {o["file"]: o["sha256"] for o in outcome.manifest["outputs"]}
    mismatches = sorted(f for f in set(recorded) | set(fresh) if recorded.get(f) != fresh.get(f))
    if mismatches:
        log.warning("replay differs from the manifest in %d file(s); treating it as a fresh run", len(mismatches))
    return ReplayOutcome(outcome, not mismatches, mismatches)
