"""Experiment orchestration: configs, deterministic seeding, runners, and record I/O.

Both studies emit flat ``ExperimentRecord`` rows ready for tabular output.
Reproducibility rules:

* every random draw comes from a substream keyed by
  (master_seed, experiment part, sweep coordinates), so reruns and thread
  counts never change results;
* all algorithms inside one replicate consume the same truth, observations,
  and initial ensemble (paired comparisons);
* the no-assimilation baseline of the cycled study is propagated by the model
  only and never sees an observation.

Failed replicates (filter divergence) are reported as records with empty
error fields rather than dropped: an algorithm that blows up is a result.
"""

from __future__ import annotations

import csv
import json
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Ensemble, LinearGaussianObs, RingGrid
from .errors import DegenerateWeightsError, DivergenceError, SingularMatrixError
from .exact import conjugate_posterior, optimal_mse_dx, optimal_mse_x
from .filters import GammaPolicy, enkf_update, enkpf_update, pf_update, select_gamma
from .local import (
    LocalizationConfig,
    block_lenkpf_update,
    lenkf_update,
    lpf_update,
    naive_lenkpf_update,
)
from .metrics import mse_dx, mse_x, relative_mse
from .models import (
    ConjugateSetup,
    Lorenz96Config,
    climatology_ensemble,
    integrate,
    lorenz96_initial_state,
    observe,
    propagate,
)

__all__ = [
    "GLOBAL_ALGORITHMS",
    "LOCAL_ALGORITHMS",
    "ALGORITHMS",
    "ConjugateExperimentConfig",
    "LorenzExperimentConfig",
    "ExperimentRecord",
    "substream",
    "run_conjugate_experiment",
    "run_lorenz_experiment",
    "write_records",
    "read_records",
    "summarize_records",
    "conjugate_config_from_dict",
    "lorenz_config_from_dict",
]

GLOBAL_ALGORITHMS = ("pf", "enkf", "enkpf")
LOCAL_ALGORITHMS = ("lenkf", "lpf", "naive-lenkpf", "block-lenkpf")
ALGORITHMS = GLOBAL_ALGORITHMS + LOCAL_ALGORITHMS

CSV_FIELDS = (
    "algorithm",
    "N",
    "k",
    "l",
    "gamma",
    "replicate",
    "mse_x",
    "mse_dx",
    "rel_mse_x",
    "rel_mse_dx",
    "ref_mse_x",
    "ref_mse_dx",
    "wall_time_s",
)

_FAILURE_CAUSES = (
    DivergenceError,
    DegenerateWeightsError,
    SingularMatrixError,
    np.linalg.LinAlgError,
)


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Independent generator keyed by the master seed and sweep coordinates.

    String keys are hashed with CRC-32 so the scheme is stable across runs and
    platforms; None becomes a fixed sentinel.
    """
    entropy = [int(master_seed)]
    for key in keys:
        if key is None:
            entropy.append(0xFFFFFFFF)
        elif isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class ExperimentRecord:
    """One (algorithm, sweep point, replicate) result row."""

    algorithm: str
    n: int
    k: int
    l: int | None
    gamma: float | None
    replicate: int
    mse_x: float | None
    mse_dx: float | None
    rel_mse_x: float | None
    rel_mse_dx: float | None
    ref_mse_x: float | None
    ref_mse_dx: float | None
    wall_time_s: float | None = field(default=None, compare=False)
    fail_cycle: int | None = field(default=None, compare=False)

    def __post_init__(self):
        for raw, rel, ref in (
            (self.mse_x, self.rel_mse_x, self.ref_mse_x),
            (self.mse_dx, self.rel_mse_dx, self.ref_mse_dx),
        ):
            if raw is not None and rel is not None and ref is not None:
                if abs(rel - raw / ref) > 1e-12 * max(1.0, abs(rel)):
                    raise ValueError("relative value inconsistent with raw/reference")

    @property
    def failed(self) -> bool:
        return self.mse_x is None


@dataclass(frozen=True)
class ConjugateExperimentConfig:
    """One-step conjugate study sweep: dimensions x algorithms x radii x replicates."""

    dims: tuple[int, ...]
    k: int
    radius_l: tuple[int, ...]
    gamma_policy: GammaPolicy
    algorithms: tuple[str, ...]
    n_replicates: int
    master_seed: int
    support_points: int = 20

    def __post_init__(self):
        dims = tuple(int(n) for n in _as_tuple(self.dims))
        radii = tuple(int(l) for l in _as_tuple(self.radius_l))
        algorithms = tuple(self.algorithms)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "radius_l", radii)
        object.__setattr__(self, "algorithms", algorithms)
        if not dims:
            raise ValueError("dims must be nonempty")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        unknown = set(algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")
        if any(set(algorithms) & set(LOCAL_ALGORITHMS)) and not radii:
            raise ValueError("local algorithms need at least one radius")
        for n in dims:
            for l in radii:
                if l > n // 2:
                    raise ValueError(f"radius {l} exceeds floor({n}/2)")


@dataclass(frozen=True)
class LorenzExperimentConfig:
    """Cycled Lorenz96 twin-experiment sweep."""

    model: Lorenz96Config
    k_values: tuple[int, ...]
    radius_l: tuple[int, ...]
    gamma_policy: GammaPolicy
    algorithms: tuple[str, ...]
    n_cycles: int
    burn_in: int
    n_repeats: int
    master_seed: int

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in _as_tuple(self.k_values)))
        object.__setattr__(self, "radius_l", tuple(int(l) for l in _as_tuple(self.radius_l)))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        if not self.k_values:
            raise ValueError("k_values must be nonempty")
        if not 0 <= self.burn_in < self.n_cycles:
            raise ValueError("need 0 <= burn_in < n_cycles")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        unknown = set(self.algorithms) - set(ALGORITHMS + ("none",))
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")
        for l in self.radius_l:
            if l > self.model.dim // 2:
                raise ValueError(f"radius {l} exceeds floor({self.model.dim}/2)")


def _as_tuple(value) -> tuple:
    if isinstance(value, (list, tuple, np.ndarray)):
        return tuple(value)
    return (value,)


# ---------------------------------------------------------------------------
# Conjugate one-step study


def _apply_update(
    algorithm: str,
    ens: Ensemble,
    obs: LinearGaussianObs,
    grid: RingGrid,
    loc_cfg: LocalizationConfig | None,
    policy: GammaPolicy,
    rng: np.random.Generator,
) -> tuple[Ensemble, float | None]:
    """Run one update step; returns the analysis ensemble and a gamma summary."""
    if algorithm == "pf":
        out, _ = pf_update(ens, obs, rng.random())
        return out, None
    if algorithm == "enkf":
        return enkf_update(ens, obs, rng), None
    if algorithm == "enkpf":
        u = rng.random()
        gamma = select_gamma(ens, obs, policy)
        out, diag = enkpf_update(ens, obs, gamma, u, rng)
        return out, diag.gamma
    if algorithm == "lenkf":
        return lenkf_update(ens, obs, grid, loc_cfg, rng), None
    if algorithm == "lpf":
        return lpf_update(ens, obs, grid, loc_cfg, rng.random()), None
    if algorithm == "naive-lenkpf":
        out, gammas = naive_lenkpf_update(ens, obs, grid, loc_cfg, policy, rng.random(), rng)
        with np.errstate(invalid="ignore"):
            mean_gamma = float(np.nanmean(gammas)) if np.any(np.isfinite(gammas)) else None
        return out, mean_gamma
    if algorithm == "block-lenkpf":
        out, gammas = block_lenkpf_update(ens, obs, grid, loc_cfg, policy, rng.random(), rng)
        return out, float(np.mean(gammas)) if gammas.size else None
    raise ValueError(f"unknown algorithm {algorithm!r}")


def _conjugate_task(cfg: ConjugateExperimentConfig, n: int, rep: int, refs) -> list[ExperimentRecord]:
    setup, ref_x, ref_dx = refs
    grid = RingGrid(n)
    rng_data = substream(cfg.master_seed, "conjugate-data", n, rep)
    truth = setup.draw_truth(rng_data)
    obs = observe(truth, setup.observation_model, rng_data)
    ens0 = setup.draw_ensemble(cfg.k, rng_data)
    records = []
    for algorithm in cfg.algorithms:
        radii = cfg.radius_l if algorithm in LOCAL_ALGORITHMS else (None,)
        for l in radii:
            loc_cfg = LocalizationConfig(radius_l=l) if l is not None else None
            rng_f = substream(cfg.master_seed, "conjugate-filter", n, rep, algorithm, l)
            start = time.perf_counter()
            try:
                out, gamma = _apply_update(
                    algorithm, ens0, obs, grid, loc_cfg, cfg.gamma_policy, rng_f
                )
            except _FAILURE_CAUSES:
                records.append(
                    ExperimentRecord(
                        algorithm, n, cfg.k, l, None, rep,
                        None, None, None, None, float(ref_x), float(ref_dx),
                        wall_time_s=time.perf_counter() - start,
                    )
                )
                continue
            elapsed = time.perf_counter() - start
            err_x = mse_x(out, truth)
            err_dx = mse_dx(out, truth)
            records.append(
                ExperimentRecord(
                    algorithm, n, cfg.k, l, gamma, rep,
                    err_x, err_dx,
                    relative_mse(err_x, ref_x), relative_mse(err_dx, ref_dx),
                    float(ref_x), float(ref_dx),
                    wall_time_s=elapsed,
                )
            )
    return records


def run_conjugate_experiment(
    cfg: ConjugateExperimentConfig, threads: int = 1
) -> list[ExperimentRecord]:
    """One-step conjugate study: draw, update once per algorithm, score against the oracle."""
    refs_by_n = {}
    for n in cfg.dims:
        setup = ConjugateSetup(n, cfg.support_points)
        model = setup.observation_model
        _, sigma_f = conjugate_posterior(setup.sigma_p, model.H, model.R, np.zeros(model.H.shape[0]))
        refs_by_n[n] = (setup, optimal_mse_x(sigma_f), optimal_mse_dx(sigma_f))
    tasks = [(n, rep) for n in cfg.dims for rep in range(cfg.n_replicates)]
    return _run_tasks(
        tasks, lambda n, rep: _conjugate_task(cfg, n, rep, refs_by_n[n]), threads
    )


# ---------------------------------------------------------------------------
# Cycled Lorenz96 study


def _lorenz_truth_and_obs(cfg: LorenzExperimentConfig, repeat: int):
    model = cfg.model
    rng = substream(cfg.master_seed, "lorenz-truth", repeat)
    state = lorenz96_initial_state(model, rng)
    obs_model = model.observation_model()
    d = obs_model.H.shape[0]
    truth = np.empty((cfg.n_cycles, model.dim))
    noise = obs_model.chol_r @ rng.standard_normal((d, cfg.n_cycles))
    for cycle in range(cfg.n_cycles):
        state = integrate(state, model.assim_interval, model.dt, model.forcing)
        truth[cycle] = state
    ys = truth @ obs_model.H.T + noise.T
    return obs_model, truth, ys


def _cycle_filter(
    cfg: LorenzExperimentConfig,
    algorithm: str,
    l: int | None,
    k: int,
    repeat: int,
    obs_model,
    truth: np.ndarray,
    ys: np.ndarray,
    ens0: Ensemble,
):
    """Run one algorithm through all cycles; returns (mse per cycle, gamma mean, fail cycle)."""
    model = cfg.model
    grid = RingGrid(model.dim)
    loc_cfg = LocalizationConfig(radius_l=l) if l is not None else None
    rng = substream(cfg.master_seed, "lorenz-filter", repeat, k, algorithm, l)
    ens = ens0
    errors = np.full(cfg.n_cycles, np.nan)
    gamma_sums, gamma_count = 0.0, 0
    for cycle in range(cfg.n_cycles):
        try:
            ens = propagate(ens, model.assim_interval, model.dt, model.forcing)
            if algorithm != "none":
                obs = LinearGaussianObs(
                    ys[cycle], obs_model.H, obs_model.R, obs_model.obs_sites
                )
                ens, gamma = _apply_update(
                    algorithm, ens, obs, grid, loc_cfg, cfg.gamma_policy, rng
                )
                if gamma is not None and cycle >= cfg.burn_in:
                    gamma_sums += gamma
                    gamma_count += 1
        except _FAILURE_CAUSES:
            return errors, None, cycle
        except ValueError:
            # Non-finite ensemble values surface as validation errors.
            return errors, None, cycle
        errors[cycle] = mse_x(ens, truth[cycle])
    gamma_mean = gamma_sums / gamma_count if gamma_count else None
    return errors, gamma_mean, None


def _lorenz_task(cfg: LorenzExperimentConfig, k: int, repeat: int) -> list[ExperimentRecord]:
    model = cfg.model
    obs_model, truth, ys = _lorenz_truth_and_obs(cfg, repeat)
    rng_ens = substream(cfg.master_seed, "lorenz-ens", repeat, k)
    ens0 = climatology_ensemble(model, k, rng_ens)
    base_errors, _, base_fail = _cycle_filter(
        cfg, "none", None, k, repeat, obs_model, truth, ys, ens0
    )
    if base_fail is not None:
        raise DivergenceError("no-assimilation baseline diverged", base_fail)
    ref = float(np.mean(base_errors[cfg.burn_in :]))
    records = []
    for algorithm in cfg.algorithms:
        radii = cfg.radius_l if algorithm in LOCAL_ALGORITHMS else (None,)
        for l in radii:
            start = time.perf_counter()
            if algorithm == "none":
                errors, gamma_mean, fail = base_errors, None, None
            else:
                errors, gamma_mean, fail = _cycle_filter(
                    cfg, algorithm, l, k, repeat, obs_model, truth, ys, ens0
                )
            elapsed = time.perf_counter() - start
            if fail is not None:
                records.append(
                    ExperimentRecord(
                        algorithm, model.dim, k, l, None, repeat,
                        None, None, None, None, ref, None,
                        wall_time_s=elapsed, fail_cycle=fail,
                    )
                )
                continue
            err = float(np.mean(errors[cfg.burn_in :]))
            records.append(
                ExperimentRecord(
                    algorithm, model.dim, k, l, gamma_mean, repeat,
                    err, None, relative_mse(err, ref), None, ref, None,
                    wall_time_s=elapsed,
                )
            )
    return records


def run_lorenz_experiment(
    cfg: LorenzExperimentConfig, threads: int = 1
) -> list[ExperimentRecord]:
    """Cycled twin experiment: assimilate every interval, score against the free ensemble."""
    tasks = [(k, repeat) for k in cfg.k_values for repeat in range(cfg.n_repeats)]
    return _run_tasks(tasks, lambda k, repeat: _lorenz_task(cfg, k, repeat), threads)


def _run_tasks(tasks, fn, threads: int) -> list[ExperimentRecord]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(lambda args: fn(*args), tasks))
    else:
        chunks = [fn(*args) for args in tasks]
    return [record for chunk in chunks for record in chunk]


# ---------------------------------------------------------------------------
# Record I/O


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _record_row(record: ExperimentRecord, include_timings: bool) -> list:
    wall = record.wall_time_s if include_timings else None
    return [
        record.algorithm, record.n, record.k, record.l, record.gamma,
        record.replicate, record.mse_x, record.mse_dx, record.rel_mse_x,
        record.rel_mse_dx, record.ref_mse_x, record.ref_mse_dx, wall,
    ]


def write_records(records, path, fmt: str = "csv", include_timings: bool = False):
    """Write records as CSV or JSON-lines.

    Timings are excluded by default so that identical (config, seed) runs
    produce byte-identical files; pass ``include_timings=True`` to keep them.
    """
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"format must be 'csv' or 'jsonl', got {fmt!r}")
    path = Path(path)
    try:
        with open(path, "w", newline="") as handle:
            if fmt == "csv":
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(CSV_FIELDS)
                for record in records:
                    writer.writerow(
                        [_format_cell(v) for v in _record_row(record, include_timings)]
                    )
            else:
                for record in records:
                    row = _record_row(record, include_timings)
                    handle.write(json.dumps(dict(zip(CSV_FIELDS, row))) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write records to {path}: {exc}") from exc


def read_records(path, fmt: str = "csv") -> list[ExperimentRecord]:
    """Parse a records file written by :func:`write_records`."""
    path = Path(path)
    records = []
    if fmt == "csv":
        with open(path, newline="") as handle:
            for row in csv.DictReader(handle):
                records.append(_record_from_mapping({k: (v if v != "" else None) for k, v in row.items()}))
    elif fmt == "jsonl":
        with open(path) as handle:
            for line in handle:
                if line.strip():
                    records.append(_record_from_mapping(json.loads(line)))
    else:
        raise ValueError(f"format must be 'csv' or 'jsonl', got {fmt!r}")
    return records


def _record_from_mapping(row) -> ExperimentRecord:
    def _float(v):
        return None if v is None else float(v)

    def _int(v):
        return None if v is None else int(v)

    return ExperimentRecord(
        algorithm=row["algorithm"],
        n=int(row["N"]),
        k=int(row["k"]),
        l=_int(row["l"]),
        gamma=_float(row["gamma"]),
        replicate=int(row["replicate"]),
        mse_x=_float(row["mse_x"]),
        mse_dx=_float(row["mse_dx"]),
        rel_mse_x=_float(row["rel_mse_x"]),
        rel_mse_dx=_float(row["rel_mse_dx"]),
        ref_mse_x=_float(row["ref_mse_x"]),
        ref_mse_dx=_float(row["ref_mse_dx"]),
        wall_time_s=_float(row["wall_time_s"]),
    )


def summarize_records(records) -> list[dict]:
    """Aggregate records per (algorithm, N, k, l).

    Reports failure counts and both the mean over successful replicates and
    the failure-inclusive mean (infinite once any replicate diverged).
    """
    groups: dict[tuple, list[ExperimentRecord]] = {}
    for record in records:
        groups.setdefault((record.algorithm, record.n, record.k, record.l), []).append(record)
    summary = []
    for key in sorted(groups, key=lambda t: (t[0], t[1], t[2], -1 if t[3] is None else t[3])):
        algorithm, n, k, l = key
        rows = groups[key]
        ok = [r for r in rows if not r.failed]
        failed = len(rows) - len(ok)
        mean_ok = float(np.mean([r.rel_mse_x for r in ok])) if ok else None
        gammas = [r.gamma for r in ok if r.gamma is not None]
        summary.append(
            {
                "algorithm": algorithm,
                "N": n,
                "k": k,
                "l": l,
                "n_ok": len(ok),
                "n_failed": failed,
                "mean_rel_mse_x": mean_ok,
                "mean_rel_mse_x_incl_failures": float("inf") if failed else mean_ok,
                "mean_gamma": float(np.mean(gammas)) if gammas else None,
            }
        )
    return summary


# ---------------------------------------------------------------------------
# Config parsing (JSON-friendly dictionaries)


def _gamma_policy_from(obj) -> GammaPolicy:
    if isinstance(obj, GammaPolicy):
        return obj
    mode = obj.get("mode")
    if mode == "fixed":
        return GammaPolicy.fixed(obj["value"])
    if mode == "adaptive":
        return GammaPolicy.adaptive(obj["ess_lo"], obj["ess_hi"])
    raise ValueError(f"unknown gamma policy mode {mode!r}")


def conjugate_config_from_dict(data: dict) -> ConjugateExperimentConfig:
    return ConjugateExperimentConfig(
        dims=_as_tuple(data["dims"]),
        k=int(data["k"]),
        radius_l=_as_tuple(data.get("radius_l", ())),
        gamma_policy=_gamma_policy_from(data["gamma"]),
        algorithms=tuple(data["algorithms"]),
        n_replicates=int(data["n_replicates"]),
        master_seed=int(data["master_seed"]),
        support_points=int(data.get("support_points", 20)),
    )


def lorenz_config_from_dict(data: dict) -> LorenzExperimentConfig:
    model = data.get("model", {})
    return LorenzExperimentConfig(
        model=Lorenz96Config(
            dim=int(model.get("dim", 40)),
            forcing=float(model.get("forcing", 8.0)),
            dt=float(model.get("dt", 0.05)),
            assim_interval=float(model.get("assim_interval", 0.4)),
            obs_spacing=int(model.get("obs_spacing", 1)),
            obs_noise_var=float(model.get("obs_noise_var", 1.0)),
        ),
        k_values=_as_tuple(data["k_values"]),
        radius_l=_as_tuple(data.get("radius_l", ())),
        gamma_policy=_gamma_policy_from(data["gamma"]),
        algorithms=tuple(data["algorithms"]),
        n_cycles=int(data["n_cycles"]),
        burn_in=int(data.get("burn_in", 100)),
        n_repeats=int(data["n_repeats"]),
        master_seed=int(data["master_seed"]),
    )


def override_config(cfg, seed: int | None = None, replicates: int | None = None):
    """Apply CLI-level overrides to either experiment config."""
    updates = {}
    if seed is not None:
        updates["master_seed"] = seed
    if replicates is not None:
        if isinstance(cfg, ConjugateExperimentConfig):
            updates["n_replicates"] = replicates
        else:
            updates["n_repeats"] = replicates
    return replace(cfg, **updates) if updates else cfg
