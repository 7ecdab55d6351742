"""Command-line experiment runner.

Subcommands::

    pgsm run CONFIG          run replicate chains, write JSONL traces and a manifest
    pgsm enumcheck CONFIG    compare kernels with the enumerated posterior (T <= 8)
    pgsm bench CONFIG        time-vs-metric series per schedule plus the per-weight timing probe
    pgsm gen-data ...        write a synthetic dataset as CSV with a label sidecar

Configuration is a JSON file validated against ``schemas/config.schema.json``.
The output directory comes from ``--output-dir``, else ``PGSM_OUTPUT_DIR``,
else the ``output_dir`` key.  Failures print a JSON object to stderr and exit
nonzero.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .bench import weight_timing_probe
from .core import PGSMConfig
from .evaluation import (
    LabeledDataset,
    exact_posterior,
    gen_bernoulli_mixture,
    gen_gaussian_mixture,
    heldout_mask,
    load_csv_dataset,
    save_csv_dataset,
    tv_distance,
)
from .likelihoods import make_model, pyclone_matrix, read_pyclone_file
from .partition import Clustering, DirichletProcess, FiniteDirichlet, PitmanYor
from .samplers import Chain, ChainConfig, KernelSchedule, run_chain

ENUMCHECK_MAX_T = 8
ENUMCHECK_ITERATIONS = 200_000


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


# --------------------------------------------------------------------------- configuration


def load_schema(name: str = "config") -> dict:
    return json.loads(resources.files("pgsm").joinpath(f"schemas/{name}.schema.json").read_text())


def _fill_defaults(schema: dict, inst):
    if not isinstance(inst, dict):
        return inst
    if "oneOf" in schema:
        for branch in schema["oneOf"]:
            if jsonschema.Draft202012Validator(branch).is_valid(inst):
                return _fill_defaults(branch, inst)
        return inst
    for key, sub in schema.get("properties", {}).items():
        if key not in inst and "default" in sub:
            inst[key] = copy.deepcopy(sub["default"])
        if key in inst:
            inst[key] = _fill_defaults(sub, inst[key])
    return inst


def validate_config(cfg: dict) -> dict:
    """Validate against the schema and return a copy with defaults filled in."""
    schema = load_schema()
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: len(e.absolute_path))
    if errors:
        e = errors[0]
        key = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{key}: {e.message}", key)
    cfg = _fill_defaults(schema, copy.deepcopy(cfg))
    cfg.setdefault("pgsm", _fill_defaults(schema["properties"]["pgsm"], {}))
    cfg.setdefault("prior", {"kind": "dp", "alpha": 1.0})
    cfg.setdefault("probe", _fill_defaults(schema["properties"]["probe"], {}))
    build_prior(cfg["prior"])
    try:
        PGSMConfig(**cfg["pgsm"])
    except ValueError as exc:
        raise ConfigError(str(exc), "pgsm") from exc
    if cfg["anchor_proposal"] != "uniform" and cfg["pgsm"]["num_anchors"] != 2:
        raise ConfigError("informed anchor proposals need num_anchors = 2", "anchor_proposal")
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(cfg)


def build_prior(pcfg: dict):
    kind = pcfg["kind"]
    try:
        if kind == "dp":
            return DirichletProcess(pcfg.get("alpha", 1.0))
        if kind == "py":
            return PitmanYor(pcfg.get("alpha", 1.0), pcfg.get("discount", 0.0))
        return FiniteDirichlet(pcfg.get("delta", 1.0), pcfg.get("K", 5))
    except ValueError as exc:
        raise ConfigError(str(exc), "prior") from exc


def build_dataset(cfg: dict) -> tuple[LabeledDataset, object]:
    dcfg = cfg["dataset"]
    mcfg = dict(cfg["model"])
    kind = mcfg.pop("kind")
    if "generator" in dcfg:
        rng = np.random.default_rng(dcfg["seed"])
        if dcfg["generator"] == "gaussian":
            ds = gen_gaussian_mixture(dcfg["k"], dcfg["n"], dcfg["D"], dcfg["separation"], rng, dcfg["noise"])
        else:
            ds = gen_bernoulli_mixture(dcfg["k"], dcfg["n"], dcfg["D"], dcfg["uninformative_fraction"], rng)
    elif dcfg["format"] == "pyclone":
        if kind != "pyclone":
            raise ConfigError("PyClone input requires model.kind = 'pyclone'", "model/kind")
        X = pyclone_matrix(read_pyclone_file(dcfg["path"]), dcfg["grid_size"], dcfg["error_rate"])
        labels = np.loadtxt(dcfg["labels"], dtype=np.int64, ndmin=1) if "labels" in dcfg else None
        ds = LabeledDataset(X, labels)
    else:
        ds = load_csv_dataset(dcfg["path"], dcfg.get("labels"))
    if kind == "pyclone" and dcfg.get("format") != "pyclone":
        raise ConfigError("model.kind = 'pyclone' needs a dataset with format 'pyclone'", "model/kind")
    dim = ds.X.shape[1]
    if "u0" in mcfg:
        mcfg["u0"] = np.asarray(mcfg["u0"], dtype=np.float64)
    if "S0" in mcfg:
        mcfg["S0"] = np.asarray(mcfg["S0"], dtype=np.float64)
    try:
        model = make_model(kind, dim, **mcfg)
        model.validate_data(ds.X)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), "model") from exc
    return ds, model


def chain_config(cfg: dict) -> ChainConfig:
    return ChainConfig(
        iterations=cfg["iterations"],
        time_budget=cfg["time_budget"],
        stride=cfg["stride"],
        init=cfg["init"],
        pgsm=PGSMConfig(**cfg["pgsm"]),
        anchor_proposal=cfg["anchor_proposal"],
        threshold=cfg["threshold"],
        adaptation_stop=cfg["adaptation_stop"],
        moves_per_iteration=cfg["moves_per_iteration"],
        alpha_prior=tuple(cfg["alpha_prior"]),
    )


def replicate_seeds(seed: int, replicates: int) -> list[np.random.SeedSequence]:
    """Independent, reproducible child streams of the master seed."""
    return np.random.SeedSequence(seed).spawn(replicates)


def output_dir(cfg: dict, flag: str | None) -> Path:
    return Path(flag or os.environ.get("PGSM_OUTPUT_DIR") or cfg["output_dir"])


# --------------------------------------------------------------------------- commands


def _record_json(rec) -> str:
    return json.dumps(dataclasses.asdict(rec), allow_nan=False)


def _run_replicate(job: tuple) -> str:
    cfg, schedule, seed_seq, path = job
    ds, model = build_dataset(cfg)
    prior = build_prior(cfg["prior"])
    mask = heldout_mask(len(ds.X), cfg["heldout_fraction"], cfg["heldout_seed"])
    X, Y = ds.X[~mask], ds.X[mask]
    labels = None if ds.labels is None else ds.labels[~mask]
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    with open(path, "w") as fh:
        for rec in run_chain(X, model, prior, KernelSchedule(tuple(schedule)), chain_config(cfg), rng,
                             heldout=Y if len(Y) else None, labels=labels, timing=cfg["timing"]):
            fh.write(_record_json(rec) + "\n")
            fh.flush()
    return str(path)


def _run_jobs(jobs: list, workers: int) -> list[str]:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_replicate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_replicate, jobs))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_run(cfg: dict, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    seeds = replicate_seeds(cfg["seed"], cfg["replicates"])
    jobs = [(cfg, cfg["schedule"], s, out / f"trace_rep{k}.jsonl") for k, s in enumerate(seeds)]
    manifest = {
        "command": "run",
        "config": cfg,
        "traces": [p.name for *_, p in jobs],
        "trace_schema": "trace.schema.json",
    }
    _write_json(out / "manifest.json", manifest)
    _run_jobs(jobs, cfg["workers"])
    return manifest


def cmd_enumcheck(cfg: dict, out: Path, iterations: int | None = None, tolerance: float | None = None) -> dict:
    ds, model = build_dataset(cfg)
    X = ds.X
    T = len(X)
    if T > ENUMCHECK_MAX_T:
        raise ConfigError(f"enumcheck needs T <= {ENUMCHECK_MAX_T}, dataset has {T}", "dataset")
    prior = build_prior(cfg["prior"])
    schedules = cfg.get("schedules") or {"+".join(cfg["schedule"]): cfg["schedule"]}
    iterations = iterations or ENUMCHECK_ITERATIONS
    tol = cfg["tolerance"] if tolerance is None else tolerance
    exact = exact_posterior(X, model, prior)
    chain_cfg = dataclasses.replace(chain_config(cfg), iterations=iterations)
    report = {"T": T, "iterations": iterations, "tolerance": tol, "kernels": {}}
    for name, (k, seed_seq) in zip(schedules, enumerate(replicate_seeds(cfg["seed"], len(schedules)))):
        sched = schedules[name]
        if "alpha" in sched:
            raise ConfigError("enumcheck compares against a fixed-alpha posterior; remove 'alpha'", f"schedules/{name}")
        rng = np.random.Generator(np.random.PCG64(seed_seq))
        chain = Chain(X, model, prior, KernelSchedule(tuple(sched)), chain_cfg, rng)
        counts: dict[tuple, int] = {}
        for _ in range(iterations):
            chain.step()
            key = chain.state.canonical()
            counts[key] = counts.get(key, 0) + 1
        emp = {Clustering.from_labels(lab): c / iterations for lab, c in counts.items()}
        tv = tv_distance(emp, exact)
        report["kernels"][name] = {"tv": tv, "pass": bool(tv <= tol)}
    report["pass"] = all(v["pass"] for v in report["kernels"].values())
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "enumcheck.json", report)
    return report


def cmd_bench(cfg: dict, out: Path, probe: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    schedules = cfg.get("schedules") or {"+".join(cfg["schedule"]): cfg["schedule"]}
    seeds = replicate_seeds(cfg["seed"], cfg["replicates"])
    jobs = []
    for name, sched in schedules.items():
        # every schedule reuses the same replicate streams and hold-out mask
        for k, s in enumerate(seeds):
            jobs.append((cfg, sched, s, out / f"bench_{name}_rep{k}.jsonl"))
    _run_jobs(jobs, cfg["workers"])
    summary = {"command": "bench", "config": cfg, "series": {}}
    for name in schedules:
        summary["series"][name] = [f"bench_{name}_rep{k}.jsonl" for k in range(len(seeds))]
    if probe:
        _, model = build_dataset(cfg)
        if model.code == 0:
            p = cfg["probe"]
            res = weight_timing_probe(model, p["cluster_counts"], p["other_points"], p["anchor_block"],
                                      build_prior(cfg["prior"]), PGSMConfig(**{**cfg["pgsm"], "early_stop": False}),
                                      p["repeats"], cfg["seed"])
            rows = [dataclasses.asdict(r) for r in res]
            summary["probe"] = {
                "rows": rows,
                "ratio_max_over_min_clusters": rows[-1]["seconds_per_weight"] / rows[0]["seconds_per_weight"],
            }
    _write_json(out / "bench.json", summary)
    return summary


def cmd_gen_data(args) -> dict:
    rng = np.random.default_rng(args.seed)
    if args.generator == "gaussian":
        ds = gen_gaussian_mixture(args.k, args.n, args.D, args.separation, rng)
    else:
        ds = gen_bernoulli_mixture(args.k, args.n, args.D, args.uninformative_fraction, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_path = out.with_suffix(".csv")
    label_path = out.with_suffix(".labels")
    save_csv_dataset(ds, data_path, label_path)
    return {"data": str(data_path), "labels": str(label_path), "n": args.n}


# --------------------------------------------------------------------------- entry point


def _apply_overrides(cfg: dict, args) -> dict:
    for key in ("seed", "iterations", "time_budget", "replicates", "stride", "init", "anchor_proposal", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    pg = cfg.setdefault("pgsm", {})
    if getattr(args, "num_particles", None) is not None:
        pg["num_particles"] = args.num_particles
    if getattr(args, "ess_threshold", None) is not None:
        pg["ess_threshold"] = args.ess_threshold
    if getattr(args, "no_timing", False):
        cfg["timing"] = False
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pgsm", description="Particle Gibbs split-merge experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON experiment configuration")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--time-budget", type=float)
        p.add_argument("--replicates", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--stride", type=int)
        p.add_argument("--init", choices=["single", "singletons"])
        p.add_argument("--anchor-proposal", choices=["uniform", "cluster_informed", "threshold_informed"])
        p.add_argument("--num-particles", type=int)
        p.add_argument("--ess-threshold", type=float)
        p.add_argument("--no-timing", action="store_true", help="write null times so traces are byte-reproducible")

    common(sub.add_parser("run", help="run replicate chains"))
    p = sub.add_parser("enumcheck", help="check kernels against the enumerated posterior")
    common(p)
    p.add_argument("--tolerance", type=float)
    p = sub.add_parser("bench", help="time-vs-metric series and per-weight timing probe")
    common(p)
    p.add_argument("--no-probe", action="store_true")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--generator", choices=["gaussian", "bernoulli"], default="gaussian")
    g.add_argument("--k", type=int, default=15)
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--D", type=int, default=2)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--uninformative-fraction", type=float, default=0.25)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output path prefix (.csv and .labels are appended)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            result = cmd_gen_data(args)
        else:
            try:
                raw = json.loads(Path(args.config).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
            # enumcheck defaults to its own, larger iteration count
            enum_iters = args.iterations or raw.get("iterations") or ENUMCHECK_ITERATIONS
            cfg = validate_config(_apply_overrides(raw, args))
            out = output_dir(cfg, args.output_dir)
            if args.command == "run":
                result = cmd_run(cfg, out)
                result = {"output_dir": str(out), "traces": result["traces"]}
            elif args.command == "enumcheck":
                result = cmd_enumcheck(cfg, out, enum_iters, args.tolerance)
                print(json.dumps(result, indent=2))
                return 0 if result["pass"] else 1
            else:
                result = cmd_bench(cfg, out, probe=not args.no_probe)
                result = {"output_dir": str(out), "series": result["series"], "probe": result.get("probe")}
        print(json.dumps(result, indent=2))
        return 0
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        err = {"error": type(exc).__name__, "message": str(exc), "key": getattr(exc, "key", None)}
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, jsonschema.ValidationError, FileNotFoundError)) else 1


if __name__ == "__main__":
    sys.exit(main())
