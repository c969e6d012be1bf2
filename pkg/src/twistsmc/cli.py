"""Command-line entry points and the experiment harness.

Subcommands: simulate | train | filter | grid-nlobs | msv-pmmh | summarize.
Configuration is a single JSON file validated against the schema shipped at
twistsmc/config_schema.json (unknown keys are rejected); named presets
provide the full-scale and desk-scale experiment settings, and CLI flags
override individual keys.  Every emitted record carries the seed material and
a hash of the resolved configuration, so any single number in the outputs can
be regenerated bit-exactly.

Exit codes: 0 on success, 2 on configuration errors, 3 on numerical failure
of a single-shot command.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

import jsonschema

from .errors import ConfigError, TwistSmcError
from .fk import run_smc
from .models import (
    LgssmParams,
    MsvParams,
    NlObsParams,
    build_lgssm_fk,
    build_msv_fk,
    build_nlobs_fk,
    load_fx_returns,
    nonlinear_observation,
    read_dataset_csv,
    simulate_lgssm,
    simulate_msv,
    simulate_nlobs,
    write_dataset_csv,
)
from .pmmh import (
    msv_model_builder,
    msv_prior,
    msv_theta_init,
    msv_transform,
    pmmh_run,
    smc_estimator,
    trained_estimator,
    tune_proposal_scale,
    write_variance_csv,
)
from .rng import as_seedseq, substream
from .schemes import (
    SchemeConfig,
    controlled_smc_train,
    forward_train,
    online_forward,
    write_training_records,
)
from .twist import TwistPolicy, build_twisted_model


def load_schema() -> dict:
    with resources.files("twistsmc").joinpath("config_schema.json").open() as fh:
        return json.load(fh)


PRESETS: dict[str, dict] = {
    "desk": {
        "grid": {
            "alphas": [0.95, 0.99],
            "sigma_x2": [0.05, 0.1, 0.15],
            "sigma_y2": [0.005, 0.055],
            "datasets_per_cell": 1,
            "T": 100,
            "n": 256,
            "runs": 16,
            "l_max": 4,
            "schemes": ["forward", "backward"],
            "mode": "diagonal",
            "tempering": True,
            "workers": 1,
        },
        "model": {"kind": "msv", "d": 3, "T": 60, "seed": 7},
        "pmmh": {
            "steps": 2000,
            "estimators": [
                {"name": "bootstrap", "kind": "bootstrap", "n": 300},
                {
                    "name": "forward-l2",
                    "kind": "forward",
                    "l_max": 2,
                    "n_train": 100,
                    "n_sample": 150,
                },
                {
                    "name": "backward-l2",
                    "kind": "backward",
                    "l_max": 2,
                    "n_train": 100,
                    "n_sample": 150,
                },
            ],
            "variance_every": 100,
            "variance_reps": 10,
            "checkpoint_every": 500,
        },
        "replication": {"runs": 16, "seed": 20240801},
    },
    "nlobs-paper": {
        "grid": {
            "alphas": [0.9, 0.95, 0.98, 0.99, 0.995],
            "sigma_x2": [round(0.05 + 0.01 * i, 4) for i in range(11)],
            "sigma_y2": [round(0.005 + 0.01 * i, 4) for i in range(6)],
            "datasets_per_cell": 10,
            "T": 100,
            "n": 1024,
            "runs": 64,
            "l_max": 10,
            "schemes": ["forward", "backward"],
            "mode": "diagonal",
            "tempering": True,
            "workers": 1,
        },
        "replication": {"runs": 64, "seed": 11235},
    },
    "msv-d8": {
        "model": {"kind": "msv", "d": 8},
        "pmmh": {
            "estimators": [
                {"name": "bootstrap", "kind": "bootstrap", "n": 4500},
                {"name": "forward-l8", "kind": "forward", "l_max": 8, "n_train": 100, "n_sample": 600},
                {"name": "forward-l4", "kind": "forward", "l_max": 4, "n_train": 200, "n_sample": 600},
                {"name": "forward-l2", "kind": "forward", "l_max": 2, "n_train": 400, "n_sample": 600},
                {"name": "backward-l8", "kind": "backward", "l_max": 8, "n_train": 100, "n_sample": 600},
                {"name": "backward-l4", "kind": "backward", "l_max": 4, "n_train": 200, "n_sample": 600},
                {"name": "backward-l2", "kind": "backward", "l_max": 2, "n_train": 400, "n_sample": 600},
            ],
            "variance_every": 100,
            "variance_reps": 10,
        },
    },
    "msv-d7": {
        "model": {"kind": "msv", "d": 7},
        "pmmh": {
            "estimators": [
                {"name": "bootstrap", "kind": "bootstrap", "n": 3000},
                {"name": "forward-l8", "kind": "forward", "l_max": 8, "n_train": 50, "n_sample": 800},
                {"name": "forward-l4", "kind": "forward", "l_max": 4, "n_train": 100, "n_sample": 800},
                {"name": "forward-l2", "kind": "forward", "l_max": 2, "n_train": 200, "n_sample": 800},
                {"name": "backward-l8", "kind": "backward", "l_max": 8, "n_train": 50, "n_sample": 800},
                {"name": "backward-l4", "kind": "backward", "l_max": 4, "n_train": 100, "n_sample": 800},
                {"name": "backward-l2", "kind": "backward", "l_max": 2, "n_train": 200, "n_sample": 800},
            ],
            "variance_every": 100,
            "variance_reps": 10,
        },
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args) -> dict:
    config: dict = {}
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}")
        config = copy.deepcopy(PRESETS[args.preset])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        config = _deep_merge(config, user)
    if getattr(args, "seed", None) is not None:
        config = _deep_merge(config, {"replication": {"seed": args.seed}})
    if getattr(args, "out", None):
        config = _deep_merge(config, {"output": {"dir": args.out}})
    try:
        jsonschema.validate(config, load_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc.message}") from exc
    return config


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _seed_key(ss: np.random.SeedSequence) -> dict:
    return {"entropy": int(ss.entropy), "spawn_key": [int(k) for k in ss.spawn_key]}


# ---------------------------------------------------------------------------
# model construction from config


def _observation_fn(model_cfg: dict):
    if model_cfg.get("observation", "nonlinear") == "linear":
        slope = float(model_cfg.get("linear_slope", 1.0))
        return lambda x: slope * x
    return nonlinear_observation


def build_reference(model_cfg: dict, observations: np.ndarray):
    kind = model_cfg["kind"]
    if kind == "nlobs":
        ys = np.asarray(observations, dtype=float).reshape(-1)
        params = NlObsParams(
            alpha=float(model_cfg["alpha"]),
            sigma_x2=float(model_cfg["sigma_x2"]),
            sigma_y2=float(model_cfg["sigma_y2"]),
            T=ys.shape[0],
        )
        return build_nlobs_fk(params, ys, observation_fn=_observation_fn(model_cfg))
    if kind == "msv":
        params = _msv_params_from_config(model_cfg)
        return build_msv_fk(params, observations)
    if kind == "lgssm":
        params = _lgssm_params_from_config(model_cfg)
        return build_lgssm_fk(params, observations)
    raise ConfigError(f"unknown model kind {kind!r}")


def _msv_params_from_config(model_cfg: dict) -> MsvParams:
    d = int(model_cfg.get("d") or len(model_cfg.get("m", [])) or 0)
    if d < 1:
        raise ConfigError("msv model needs 'd' or explicit parameter vectors")
    alpha = model_cfg.get("alpha", 0.9)
    alpha = np.full(d, float(alpha)) if np.isscalar(alpha) else np.asarray(alpha, dtype=float)
    return MsvParams(
        m=np.asarray(model_cfg.get("m", np.full(d, -1.0)), dtype=float),
        alpha=alpha,
        sigma2=np.asarray(model_cfg.get("sigma2", np.full(d, 0.2)), dtype=float),
        rho=np.asarray(model_cfg.get("rho", np.full(d - 1, 0.25)), dtype=float),
    )


def _lgssm_params_from_config(model_cfg: dict) -> LgssmParams:
    try:
        return LgssmParams(
            trans_matrix=model_cfg["trans_matrix"],
            trans_cov=model_cfg["trans_cov"],
            obs_matrix=model_cfg["obs_matrix"],
            obs_cov=model_cfg["obs_cov"],
            initial_mean=model_cfg["initial_mean"],
            initial_cov=model_cfg["initial_cov"],
        )
    except KeyError as exc:
        raise ConfigError(f"lgssm model missing {exc}") from exc


def load_observations(model_cfg: dict) -> np.ndarray:
    if "data" in model_cfg:
        path = model_cfg["data"]
        if path.endswith(".csv") and "columns" in model_cfg:
            return load_fx_returns(
                path,
                model_cfg["columns"],
                start=model_cfg.get("start"),
                end=model_cfg.get("end"),
            )
        _, ys = read_dataset_csv(path)
        return ys if model_cfg["kind"] == "msv" else ys[:, 0]
    # simulate
    kind = model_cfg["kind"]
    seed = int(model_cfg.get("seed", 0))
    T = int(model_cfg.get("T", 100))
    if kind == "nlobs":
        params = NlObsParams(
            alpha=float(model_cfg["alpha"]),
            sigma_x2=float(model_cfg["sigma_x2"]),
            sigma_y2=float(model_cfg["sigma_y2"]),
            T=T,
        )
        _, ys = simulate_nlobs(params, seed, observation_fn=_observation_fn(model_cfg))
        return ys
    if kind == "msv":
        params = _msv_params_from_config(model_cfg)
        _, ys = simulate_msv(params, T, seed)
        return ys
    if kind == "lgssm":
        params = _lgssm_params_from_config(model_cfg)
        _, ys = simulate_lgssm(params, T, seed)
        return ys
    raise ConfigError(f"unknown model kind {kind!r}")


def scheme_config_from(cfg: dict, seed: int = 0) -> SchemeConfig:
    return SchemeConfig(
        n_train=int(cfg.get("n_train", 256)),
        l_max=int(cfg.get("l_max", 4)),
        n_sample=int(cfg["n_sample"]) if "n_sample" in cfg else None,
        mode=cfg.get("mode", "diagonal"),
        tempering=bool(cfg.get("tempering", True)),
        n0=cfg.get("n0"),
        seed=seed,
    )


_TRAINERS = {
    "forward": forward_train,
    "backward": controlled_smc_train,
    "online": online_forward,
    "fast-online": lambda ref, cfg, rng: online_forward(ref, cfg, rng, fast=True),
}


# ---------------------------------------------------------------------------
# grid experiment


def _records_for_run(
    scheme: str,
    reference,
    n: int,
    l_max: int,
    mode: str,
    tempering: bool,
    run_seed,
    base: dict,
) -> list[dict]:
    t0 = time.perf_counter()
    records = []
    try:
        if scheme == "bootstrap":
            trace = run_smc(reference.fk, n, run_seed)
            elapsed = time.perf_counter() - t0
            npart = trace.n_particles
            records.append(
                {
                    **base,
                    "iteration": 0,
                    "log_z": trace.log_z_total,
                    "weight_variance": float(np.mean(npart / trace.ess_path - 1.0)),
                    "ess_min": float(trace.ess_path.min()),
                    "failure_count": 0,
                    "failed": False,
                    "wall_clock": elapsed,
                    "kernel_samples": trace.kernel_sample_count,
                }
            )
            return records
        config = SchemeConfig(n_train=n, l_max=l_max, mode=mode, tempering=tempering)
        if scheme == "forward":
            run = forward_train(reference, config, run_seed, keep_traces=False)
        elif scheme == "backward":
            run = controlled_smc_train(reference, config, run_seed)
        elif scheme == "online":
            run = online_forward(reference, config, run_seed)
        elif scheme == "fast-online":
            run = online_forward(reference, config, run_seed, fast=True)
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
        elapsed = time.perf_counter() - t0
        for rec in run.iteration_records():
            if rec["logZ"] is None:
                continue
            records.append(
                {
                    **base,
                    "iteration": rec["iteration"],
                    "log_z": rec["logZ"],
                    "weight_variance": rec["weight_variance"],
                    "ess_min": rec["ess_min"],
                    "failure_count": rec["failures"],
                    "failed": False,
                    "wall_clock": elapsed,
                    "kernel_samples": rec["sample_count"],
                }
            )
    except TwistSmcError as exc:
        elapsed = time.perf_counter() - t0
        records.append(
            {
                **base,
                "iteration": None,
                "log_z": None,
                "weight_variance": None,
                "ess_min": None,
                "failure_count": 1,
                "failed": True,
                "failure_kind": type(exc).__name__,
                "failure_t": getattr(exc, "t", None),
                "wall_clock": elapsed,
                "kernel_samples": None,
            }
        )
    return records


def _grid_task(payload: dict) -> list[dict]:
    """One (dataset, scheme) unit of grid work; module-level so worker pools
    can pickle it."""
    model_cfg = payload["model_cfg"]
    ys = np.asarray(payload["ys"], dtype=float)
    reference = build_reference(model_cfg, ys)
    root = np.random.SeedSequence(
        entropy=payload["seed"]["entropy"], spawn_key=tuple(payload["seed"]["spawn_key"])
    )
    records: list[dict] = []
    for run_idx in range(payload["runs"]):
        base = {
            "dataset": payload["dataset"],
            "scheme": payload["scheme"],
            "run": run_idx,
            "seed": _seed_key(substream(root, run_idx)),
            "config_hash": payload["config_hash"],
        }
        records.extend(
            _records_for_run(
                payload["scheme"],
                reference,
                payload["n"],
                payload["l_max"],
                payload["mode"],
                payload["tempering"],
                substream(root, run_idx),
                base,
            )
        )
    return records


def summarize_records(records: list[dict]) -> dict:
    """Per-dataset spread of the log-normalizer by scheme and iteration,
    ratios against the bootstrap baseline, and the grid-level proportions of
    datasets where each scheme beats (or badly trails) the baseline.

    A dataset whose runs failed outright for a scheme is treated as
    infinitely worse than the baseline: robustness comparisons have to count
    blow-ups, not drop them.
    """
    datasets = sorted({r["dataset"] for r in records})
    schemes = sorted({r["scheme"] for r in records})
    by_key: dict[tuple, list] = {}
    failed: dict[tuple, int] = {}
    for r in records:
        key = (r["dataset"], r["scheme"])
        if r.get("failed"):
            failed[key] = failed.get(key, 0) + 1
            continue
        by_key.setdefault((r["dataset"], r["scheme"], r["iteration"]), []).append(r["log_z"])

    per_dataset: dict[str, dict] = {}
    iterations = sorted({k[2] for k in by_key})
    for ds in datasets:
        per_dataset[ds] = {}
        boot_vals = by_key.get((ds, "bootstrap", 0), [])
        boot_sd = float(np.std(boot_vals, ddof=1)) if len(boot_vals) >= 2 else None
        for scheme in schemes:
            entry: dict = {"sd_by_iteration": {}, "ratio_by_iteration": {}}
            entry["failed_runs"] = failed.get((ds, scheme), 0)
            for it in iterations:
                vals = by_key.get((ds, scheme, it))
                if vals is None:
                    continue
                if len(vals) < 2:
                    entry["sd_by_iteration"][str(it)] = None
                    entry["status"] = "insufficient-replicates"
                    continue
                sd = float(np.std(vals, ddof=1))
                entry["sd_by_iteration"][str(it)] = sd
                if boot_sd and boot_sd > 0:
                    ratio = sd / boot_sd
                    if entry["failed_runs"] > 0:
                        ratio = float("inf")
                    entry["ratio_by_iteration"][str(it)] = ratio
            entry.setdefault("status", "ok")
            per_dataset[ds][scheme] = entry

    proportions: dict[str, dict] = {}
    for scheme in schemes:
        if scheme == "bootstrap":
            continue
        proportions[scheme] = {}
        for it in iterations:
            ratios = []
            for ds in datasets:
                entry = per_dataset[ds].get(scheme)
                if entry is None:
                    continue
                ratio = entry["ratio_by_iteration"].get(str(it))
                if entry["failed_runs"] > 0:
                    ratio = float("inf")
                if ratio is not None:
                    ratios.append(ratio)
            if not ratios:
                continue
            arr = np.asarray(ratios)
            proportions[scheme][str(it)] = {
                "datasets": len(ratios),
                "le_bootstrap": float(np.mean(arr <= 1.0)),
                "le_tenth": float(np.mean(arr <= 0.1)),
                "le_tenfold": float(np.mean(arr <= 10.0)),
                "gt_tenfold": float(np.mean(arr > 10.0)),
            }
    return {"per_dataset": per_dataset, "proportions": proportions}


def cmd_grid_nlobs(config: dict, out_dir) -> dict:
    from pathlib import Path

    grid = config.get("grid")
    if not grid:
        raise ConfigError("grid-nlobs needs a 'grid' block")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    root = as_seedseq(int(config.get("replication", {}).get("seed", 0)))
    runs = int(grid.get("runs", config.get("replication", {}).get("runs", 16)))
    schemes = ["bootstrap"] + list(grid.get("schemes", ["forward", "backward"]))
    T = int(grid.get("T", 100))
    n = int(grid.get("n", 256))
    l_max = int(grid.get("l_max", 4))
    mode = grid.get("mode", "diagonal")
    tempering = bool(grid.get("tempering", True))

    tasks = []
    cell_idx = 0
    for alpha in grid["alphas"]:
        for sx in grid["sigma_x2"]:
            for sy in grid["sigma_y2"]:
                for k in range(int(grid.get("datasets_per_cell", 1))):
                    ds_seed = substream(root, 1, cell_idx, k)
                    params = NlObsParams(alpha=alpha, sigma_x2=sx, sigma_y2=sy, T=T)
                    model_cfg = {
                        "kind": "nlobs",
                        "alpha": alpha,
                        "sigma_x2": sx,
                        "sigma_y2": sy,
                        "observation": grid.get("observation", "nonlinear"),
                        "linear_slope": grid.get("linear_slope", 1.0),
                    }
                    _, ys = simulate_nlobs(
                        params, ds_seed, observation_fn=_observation_fn(model_cfg)
                    )
                    ds_id = f"a{alpha}-sx{sx}-sy{sy}-r{k}"
                    for s_idx, scheme in enumerate(schemes):
                        tasks.append(
                            {
                                "dataset": ds_id,
                                "scheme": scheme,
                                "model_cfg": model_cfg,
                                "ys": [float(v) for v in ys],
                                "runs": runs,
                                "n": n,
                                "l_max": l_max,
                                "mode": mode,
                                "tempering": tempering,
                                "seed": _seed_key(substream(root, 2, cell_idx, k, s_idx)),
                                "config_hash": chash,
                            }
                        )
                cell_idx += 1

    workers = int(grid.get("workers", 1))
    records: list[dict] = []
    records_path = out / "records.jsonl"
    with open(records_path, "w") as fh:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for recs in pool.map(_grid_task, tasks):
                    for r in recs:
                        fh.write(json.dumps(r) + "\n")
                    records.extend(recs)
        else:
            for task in tasks:
                recs = _grid_task(task)
                for r in recs:
                    fh.write(json.dumps(r) + "\n")
                records.extend(recs)

    summary = summarize_records(records)
    summary["config_hash"] = chash
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# PMMH experiment


def cmd_msv_pmmh(config: dict, out_dir) -> dict:
    from pathlib import Path

    pm = config.get("pmmh")
    model_cfg = config.get("model")
    if not pm or not model_cfg:
        raise ConfigError("msv-pmmh needs 'pmmh' and 'model' blocks")
    if model_cfg["kind"] != "msv":
        raise ConfigError("msv-pmmh runs on msv models")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    root = as_seedseq(int(config.get("replication", {}).get("seed", 0)))
    from .models import as_observation_matrix

    ys = as_observation_matrix(load_observations(model_cfg))
    d = ys.shape[1]

    prior = msv_prior(d)
    transform = msv_transform(d)
    theta0 = msv_theta_init(ys, m_init=pm.get("m_init", "log-variance"))
    builder = msv_model_builder(ys)
    steps = int(pm["steps"])
    base_cov = np.eye(transform.dim) * 0.01

    results = {}
    for e_idx, est_cfg in enumerate(pm["estimators"]):
        name = est_cfg.get("name", est_cfg["kind"])
        if est_cfg["kind"] == "bootstrap":
            estimator = smc_estimator(builder, int(est_cfg["n"]))
        else:
            estimator = trained_estimator(
                builder,
                est_cfg["kind"],
                SchemeConfig(
                    n_train=int(est_cfg["n_train"]),
                    l_max=int(est_cfg["l_max"]),
                    n_sample=int(est_cfg["n_sample"]),
                    mode=est_cfg.get("mode", "diagonal"),
                    tempering=bool(est_cfg.get("tempering", True)),
                ),
            )
        scale = float(pm.get("proposal_scale", 1.0))
        if pm.get("pilot", False):
            scale *= tune_proposal_scale(
                estimator, prior, transform, theta0, base_cov, substream(root, e_idx, 1)
            )
        chain = pmmh_run(
            estimator,
            prior,
            transform,
            theta0,
            steps,
            scale * base_cov,
            substream(root, e_idx, 0),
            estimator_name=name,
            variance_every=int(pm.get("variance_every", 100)),
            variance_reps=int(pm.get("variance_reps", 10)),
            checkpoint_path=str(out / f"checkpoint_{name}.json"),
            checkpoint_every=int(pm.get("checkpoint_every", 500)),
        )
        chain.write_jsonl(out / f"chain_{name}.jsonl")
        write_variance_csv(chain.variance_windows, out / "variance.csv", append=e_idx > 0)
        results[name] = {
            "acceptance_rate": chain.acceptance_rate,
            "failed_proposals": chain.failed_proposals,
            "variance_windows": len(chain.variance_windows),
            "proposal_scale": scale,
        }
    with open(out / "pmmh_summary.json", "w") as fh:
        json.dump({"estimators": results, "config_hash": chash}, fh, indent=2, sort_keys=True)
    return results


# ---------------------------------------------------------------------------
# single-shot subcommands


def cmd_simulate(config: dict, out_path) -> None:
    model_cfg = config.get("model")
    if not model_cfg:
        raise ConfigError("simulate needs a 'model' block")
    kind = model_cfg["kind"]
    seed = int(model_cfg.get("seed", 0))
    T = int(model_cfg.get("T", 100))
    if kind == "nlobs":
        params = NlObsParams(
            alpha=float(model_cfg["alpha"]),
            sigma_x2=float(model_cfg["sigma_x2"]),
            sigma_y2=float(model_cfg["sigma_y2"]),
            T=T,
        )
        xs, ys = simulate_nlobs(params, seed, observation_fn=_observation_fn(model_cfg))
        meta = {
            "model": "nlobs",
            "alpha": params.alpha,
            "sigma_x2": params.sigma_x2,
            "sigma_y2": params.sigma_y2,
            "T": T,
            "seed": seed,
            "observation": model_cfg.get("observation", "nonlinear"),
        }
    elif kind == "msv":
        params = _msv_params_from_config(model_cfg)
        xs, ys = simulate_msv(params, T, seed)
        meta = {
            "model": "msv",
            "m": list(params.m),
            "alpha": list(params.alpha),
            "sigma2": list(params.sigma2),
            "rho": list(params.rho),
            "T": T,
            "seed": seed,
        }
    elif kind == "lgssm":
        params = _lgssm_params_from_config(model_cfg)
        xs, ys = simulate_lgssm(params, T, seed)
        meta = {
            "model": "lgssm",
            "T": T,
            "seed": seed,
            "trans_matrix": params.trans_matrix.tolist(),
            "trans_cov": params.trans_cov.tolist(),
            "obs_matrix": params.obs_matrix.tolist(),
            "obs_cov": params.obs_cov.tolist(),
            "initial_mean": params.initial_mean.tolist(),
            "initial_cov": params.initial_cov.tolist(),
        }
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    write_dataset_csv(out_path, xs, ys, meta)


def cmd_train(config: dict, out_path) -> None:
    model_cfg = config.get("model")
    scheme_cfg = config.get("scheme")
    if not model_cfg or not scheme_cfg:
        raise ConfigError("train needs 'model' and 'scheme' blocks")
    if scheme_cfg["kind"] == "bootstrap":
        raise ConfigError("bootstrap has nothing to train; use filter")
    ys = load_observations(model_cfg)
    reference = build_reference(model_cfg, ys)
    seed = int(config.get("replication", {}).get("seed", 0))
    config_s = scheme_config_from(scheme_cfg, seed=seed)
    trainer = _TRAINERS[scheme_cfg["kind"]]
    run = trainer(reference, config_s, as_seedseq(seed))
    run.final_policy.save(out_path)
    write_training_records(run, str(out_path) + ".training.jsonl")


def cmd_filter(config: dict, policy_path, out_path) -> dict:
    model_cfg = config.get("model")
    if not model_cfg:
        raise ConfigError("filter needs a 'model' block")
    scheme_cfg = config.get("scheme", {"kind": "bootstrap"})
    rep = config.get("replication", {})
    runs = int(rep.get("runs", 1))
    seed = int(rep.get("seed", 0))
    n = int(scheme_cfg.get("n_sample", scheme_cfg.get("n_train", 256)))
    ys = load_observations(model_cfg)
    reference = build_reference(model_cfg, ys)
    if policy_path:
        policy = TwistPolicy.load(policy_path, reference.kernels)
        model = build_twisted_model(reference, policy)
    else:
        model = reference.fk
    root = as_seedseq(seed)
    rows = []
    for r in range(runs):
        trace = run_smc(model, n, substream(root, r))
        npart = trace.n_particles
        rows.append(
            {
                "run": r,
                "log_z": trace.log_z_total,
                "ess_min": float(trace.ess_path.min()),
                "weight_variance": float(np.mean(npart / trace.ess_path - 1.0)),
            }
        )
    if out_path:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "log_z", "ess_min", "weight_variance"])
            for row in rows:
                writer.writerow(
                    [row["run"], repr(float(row["log_z"])), repr(float(row["ess_min"])), repr(float(row["weight_variance"]))]
                )
    return {"rows": rows}


def cmd_summarize(records_path, out_path) -> dict:
    records = []
    with open(records_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    summary = summarize_records(records)
    if out_path:
        with open(out_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twistsmc",
        description="Train twisted particle-filter proposals and run the benchmark studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=False):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named preset to start from")
        p.add_argument("--seed", type=int, help="override replication seed")
        p.add_argument("--out", required=needs_out, help="output path or directory")

    common(sub.add_parser("simulate", help="write a simulated dataset CSV"), needs_out=True)
    common(sub.add_parser("train", help="train a twist policy and save it"), needs_out=True)
    p_filter = sub.add_parser("filter", help="run a filter, optionally under a saved policy")
    common(p_filter)
    p_filter.add_argument("--policy", help="twist policy JSON produced by train")
    common(sub.add_parser("grid-nlobs", help="nonlinear-observation robustness grid"), needs_out=True)
    common(sub.add_parser("msv-pmmh", help="stochastic-volatility parameter inference"), needs_out=True)
    p_sum = sub.add_parser("summarize", help="recompute a grid summary from raw records")
    p_sum.add_argument("records", help="records.jsonl from grid-nlobs")
    p_sum.add_argument("--out", help="where to write the summary JSON")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "summarize":
            summary = cmd_summarize(args.records, args.out)
            if not args.out:
                json.dump(summary, sys.stdout, indent=2, sort_keys=True)
                print()
            return 0
        config = resolve_config(args)
        if args.command == "simulate":
            cmd_simulate(config, args.out)
        elif args.command == "train":
            cmd_train(config, args.out)
        elif args.command == "filter":
            result = cmd_filter(config, args.policy, args.out)
            if not args.out:
                json.dump(result, sys.stdout, indent=2)
                print()
        elif args.command == "grid-nlobs":
            cmd_grid_nlobs(config, args.out)
        elif args.command == "msv-pmmh":
            cmd_msv_pmmh(config, args.out)
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except TwistSmcError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
