"""Command line: ``hordecl gen``, ``hordecl run``, ``hordecl report``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .baselines import BASE_METHODS, BaselineConfig, make_method
from .datastream import (DatasetSpec, Scenario, gen_cil, gen_efcir, gen_synthetic_dataset,
                         load_manifest, sample_beta_probs, save_manifest, scenario_summary)
from .extractor import SelfSupConfig
from .harness import (RunRecord, TrainProtocol, config_hash, read_results, run_scenario,
                      write_results)
from .horde import HordeConfig
from .prototypes import EstimationHeuristic

log = logging.getLogger("hordecl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "HORDECL_OUT"

KIND_ALIASES = {"cil": "cil", "efcir-u": "efcir_uniform", "efcir_u": "efcir_uniform",
                "efcir_uniform": "efcir_uniform", "efcir-b": "efcir_beta", "efcir_b": "efcir_beta",
                "efcir_beta": "efcir_beta"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "results"))


def parse_seeds(raw) -> list[int]:
    if isinstance(raw, (list, tuple)):
        seeds = [int(s) for s in raw]
    else:
        seeds = [int(s) for s in str(raw).replace(";", ",").split(",") if s.strip()]
    if not seeds:
        raise UsageError("at least one seed is required")
    return seeds


# ---------------------------------------------------------------------------
# scenario construction


def build_scenario(dataset, dspec: DatasetSpec, sc: dict, seed: int) -> Scenario:
    kind = KIND_ALIASES.get(str(sc.get("kind", "")).lower())
    if kind is None:
        raise UsageError(f"unknown scenario kind {sc.get('kind')!r}")
    n = dspec.num_classes
    k0 = int(sc.get("initial_classes", n // 2))
    tasks = int(sc.get("num_tasks", 10))
    val_frac = float(sc.get("val_frac", 0.1))
    if kind == "cil":
        if tasks == 0:
            m = 0
        else:
            if (n - k0) % tasks:
                raise UsageError(f"{n - k0} remaining classes do not split into {tasks} tasks")
            m = int(sc.get("classes_per_task", (n - k0) // tasks))
        try:
            scenario = gen_cil(dataset, k0, tasks, m, val_frac, seed)
        except ValueError as e:
            raise UsageError(str(e)) from e
    else:
        budget = int(sc.get("task_budget", 20 * n))
        if kind == "efcir_uniform":
            probs = float(sc.get("p", 0.15))
            if not 0 < probs <= 1:
                raise UsageError("--p must lie in (0, 1]")
        else:
            alpha, beta = float(sc.get("alpha", 3.5)), float(sc.get("beta", 20.0))
            if alpha <= 0 or beta <= 0:
                raise UsageError("--alpha and --beta must be positive")
            probs = sample_beta_probs(alpha, beta, n, seed)
        scenario = gen_efcir(dataset, k0, tasks, budget, probs,
                             float(sc.get("initial_data_frac", 0.5)), val_frac, seed, kind)
    scenario.dataset = dspec.to_dict()
    return scenario


def cmd_gen(args) -> int:
    dspec = DatasetSpec(num_classes=args.classes, samples_per_class=args.samples_per_class,
                        input_shape=(args.size, args.size, args.channels), seed=args.dataset_seed)
    sc = {"kind": args.kind, "initial_classes": args.initial if args.initial is not None
          else args.classes // 2, "num_tasks": args.tasks, "p": args.p, "alpha": args.alpha,
          "beta": args.beta, "val_frac": args.val_frac}
    if args.budget is not None:
        sc["task_budget"] = args.budget
    try:
        dataset = gen_synthetic_dataset(dspec)
        scenario = build_scenario(dataset, dspec, sc, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out) if args.out else default_out() / f"manifest_{scenario.kind}_seed{args.seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_manifest(scenario, out)
    summary = scenario_summary(scenario, dataset)
    summary.update({"manifest": str(out), "sha256": digest})
    print(json.dumps(summary, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def _protocol(d: dict | None, **defaults) -> TrainProtocol:
    return TrainProtocol(**{**defaults, **(d or {})})


def build_configs(config: dict) -> tuple[BaselineConfig, HordeConfig]:
    b = dict(config.get("baselines") or {})
    if "hidden" in b:
        b["hidden"] = tuple(b["hidden"])
    bcfg = BaselineConfig(protocol=_protocol(config.get("protocol")),
                          head_protocol=_protocol(config.get("head_protocol"), base_lr=0.01), **b)
    h = dict(config.get("horde") or {})
    heur = EstimationHeuristic(h.pop("heuristic", "original_features"),
                               float(h.pop("random_scale", 40.0)),
                               bool(h.pop("literal_projection", False)))
    selfsup = SelfSupConfig(**(h.pop("selfsup", None) or {}))
    for key in ("full_hidden", "slim_hidden"):
        if key in h:
            h[key] = tuple(h[key])
    hcfg = HordeConfig(heuristic=heur, selfsup=selfsup,
                       fe_protocol=_protocol(config.get("fe_protocol") or config.get("protocol")),
                       head_protocol=_protocol(config.get("head_protocol"), base_lr=0.01), **h)
    return bcfg, hcfg


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping")
    return data


def merge_cli(config: dict, args) -> dict:
    config = json.loads(json.dumps(config))
    if args.method:
        config["methods"] = [m for m in args.method.split(",") if m]
    if args.seeds:
        config["seeds"] = parse_seeds(args.seeds)
    if args.manifest:
        config["manifest"] = args.manifest
    horde = config.setdefault("horde", {})
    if args.heuristic:
        horde["heuristic"] = args.heuristic
    if args.random_scale is not None:
        horde["random_scale"] = args.random_scale
    if args.fe_budget is not None:
        horde["budget"] = args.fe_budget
    if args.tau_e is not None:
        horde["tau_e"] = args.tau_e
    if args.out:
        config["out"] = args.out
    if args.mask_ce:
        config["methods"] = [m if m.endswith("_masked") or m.startswith(("horde", "fetril", "joint"))
                             else m + "_masked" for m in config.get("methods", [])]
    return config


def validate(config: dict) -> None:
    methods = config.get("methods") or []
    if not methods:
        raise UsageError("no methods given")
    for m in methods:
        base = m[: -len("_masked")] if m.endswith("_masked") else m
        if base not in BASE_METHODS:
            raise UsageError(f"unknown method {m!r}")
    parse_seeds(config.get("seeds") or [])
    if not config.get("manifest") and not config.get("scenario"):
        raise UsageError("either a manifest or an inline scenario is required")


def _job(config: dict, method_name: str, seed: int) -> tuple[str, int, str | None]:
    out = Path(config.get("out") or default_out())
    if config.get("manifest"):
        scenario = load_manifest(config["manifest"])
        dspec = DatasetSpec.from_dict(scenario.dataset or config.get("dataset") or {})
        dataset = gen_synthetic_dataset(dspec)
    else:
        dspec = DatasetSpec.from_dict({**DatasetSpec().to_dict(), **(config.get("dataset") or {})})
        dataset = gen_synthetic_dataset(dspec)
        scenario = build_scenario(dataset, dspec, config["scenario"], seed)
    bcfg, hcfg = build_configs(config)
    method = make_method(method_name, dataset.input_shape, seed, bcfg, hcfg)
    job_cfg = {k: v for k, v in config.items() if k not in ("out", "methods", "seeds")}
    job_cfg["method"] = method_name
    if config.get("manifest"):
        # identify the manifest by content so results do not depend on where it lives
        path = Path(config["manifest"])
        job_cfg["manifest"] = {"name": path.name,
                               "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
    record = RunRecord(method_name, scenario.kind, seed, config_hash(job_cfg))
    try:
        run_scenario(method, scenario, dataset, seed, job_cfg, record=record)
    except Exception as e:  # flush what finished, then report the failure
        log.exception("%s seed %d failed", method_name, seed)
        if record.tasks:
            write_results(record, {**job_cfg, "status": f"failed: {e}"}, out)
        return method_name, seed, repr(e)
    write_results(record, job_cfg, out)
    return method_name, seed, None


def cmd_run(args) -> int:
    config = merge_cli(load_config(args.config), args)
    validate(config)
    seeds = parse_seeds(config["seeds"])
    jobs = [(m, s) for m in config["methods"] for s in seeds]
    workers = max(1, int(args.workers or config.get("workers", 1)))
    if workers == 1:
        outcomes = [_job(config, m, s) for m, s in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_job, [config] * len(jobs), *zip(*jobs)))
    failed = [o for o in outcomes if o[2]]
    for m, s, err in failed:
        print(f"FAILED {m} seed={s}: {err}", file=sys.stderr)
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} runs written to "
          f"{config.get('out') or default_out()}")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# report


def aggregate(results_dir: str | Path) -> tuple[list[dict], list[dict]]:
    files = sorted(Path(results_dir).glob("*.csv"))
    runs = []
    for f in files:
        if f.name in ("summary.csv", "curves.csv"):
            continue
        parsed = read_results(f)
        if parsed["header"].get("method"):
            runs.append(parsed)
    if not runs:
        raise UsageError(f"no results files in {results_dir}")
    by_method: dict[str, list[dict]] = {}
    for r in runs:
        by_method.setdefault(r["header"]["method"], []).append(r)
    summary, curves = [], []
    for method in sorted(by_method):
        rs = by_method[method]
        acc = np.array([r["aggregate"]["avg_accuracy"] for r in rs]) * 100
        forg = np.array([r["aggregate"]["avg_forgetting"] for r in rs]) * 100
        summary.append({"method": method, "runs": len(rs),
                        "avg_acc_mean": acc.mean(), "avg_acc_std": acc.std(),
                        "avg_forg_mean": forg.mean(), "avg_forg_std": forg.std()})
        n_tasks = min(len(r["rows"]) for r in rs)
        for t in range(n_tasks):
            a = np.array([float(r["rows"][t]["accuracy"]) for r in rs]) * 100
            curves.append({"method": method, "task": t, "accuracy_mean": a.mean(),
                           "accuracy_std": a.std()})
    return summary, curves


def _write_csv(path: Path, rows: list[dict]) -> None:
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(format(v, ".6f") if isinstance(v, float) else str(v)
                              for v in (r[k] for k in keys)))
    path.write_text("\n".join(lines) + "\n")


def cmd_report(args) -> int:
    results_dir = Path(args.results)
    if not results_dir.is_dir():
        raise UsageError(f"{results_dir} is not a directory")
    summary, curves = aggregate(results_dir)
    out = Path(args.out) if args.out else results_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", summary)
    _write_csv(out / "curves.csv", curves)
    print(f"{'method':<16}{'runs':>5}  {'Avg. A':>14}  {'Avg. f':>14}")
    for s in summary:
        print(f"{s['method']:<16}{s['runs']:>5}  {s['avg_acc_mean']:6.2f} ± {s['avg_acc_std']:5.2f}"
              f"  {s['avg_forg_mean']:6.2f} ± {s['avg_forg_std']:5.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hordecl", description="Exemplar-free class-incremental learning with repetition")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a scenario manifest")
    g.add_argument("--kind", required=True, choices=sorted(KIND_ALIASES))
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--tasks", type=int, default=10)
    g.add_argument("--initial", type=int, default=None)
    g.add_argument("--budget", type=int, default=None)
    g.add_argument("--p", type=float, default=0.15)
    g.add_argument("--alpha", type=float, default=3.5)
    g.add_argument("--beta", type=float, default=20.0)
    g.add_argument("--val-frac", type=float, default=0.1)
    g.add_argument("--samples-per-class", type=int, default=150)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--dataset-seed", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run methods over a scenario")
    r.add_argument("config", nargs="?", help="YAML run configuration")
    r.add_argument("--manifest")
    r.add_argument("--method", help="comma-separated method names")
    r.add_argument("--seeds", "--seed", dest="seeds")
    r.add_argument("--mask-ce", action="store_true")
    r.add_argument("--heuristic", choices=["zeros", "random", "original", "original_features"])
    r.add_argument("--random-scale", type=float)
    r.add_argument("--fe-budget", type=int)
    r.add_argument("--tau-e", type=float)
    r.add_argument("--workers", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate results into tables and curves")
    rep.add_argument("results")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"hordecl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        log.exception("runtime failure")
        print(f"hordecl: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
