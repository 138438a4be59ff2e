"""
Command-line entry point.

Every subcommand takes a strict JSON config (``--config``), with each config
field also exposed as a flag (``--n-T 5``, ``--grid '[[2, 90]]'``); flags
override the file, the file overrides defaults. Outputs go to ``--out`` and
are first written with a ``.partial`` suffix, then renamed once complete.
The resolved config is echoed to ``effective_config.json`` and can be fed
back with ``--config`` to reproduce a run.
"""
import argparse
import dataclasses
import json
import os
import sys
import types
import typing
from dataclasses import dataclass, field

import numpy as np

from . import analysis, bench
from .kernels import SpatialHyperparams
from .loop import LoopConfig, run_loop
from .mtgp import Dataset, fit, inter_task_correlation, loo_cross_validation

SEED_MAX = 2 ** 64


class ConfigError(ValueError):
    pass


@dataclass
class FitConfig:
    data: str = ""
    rank: int | None = None
    restarts: int = 10
    standardize: bool = True
    seed: int = 0


@dataclass
class LooConfig:
    data: str = ""
    target_task: int = 0
    rank: int | None = None
    restarts: int = 10
    seed: int = 0


@dataclass
class OptimizeConfig:
    n_T: int = 5
    n_S: int = 20
    n_o: int = 20
    K: int = 3
    anchor_count: int = 5
    rank_batch: int = 1
    interleave: bool = True
    fit_restarts: int = 5
    qmc_samples: int = 64
    acq_restarts: int = 20
    raw_samples: int = 256
    thompson_draws: int = 1000
    noise_sd: float = 0.1
    objective_transform: list[float] = field(default_factory=lambda: [0.75, 0.4, 0.8])
    constraint_transform: list[float] = field(default_factory=lambda: [1.25, 0.8, 4.0])
    threshold: float = 1.25
    seed: int = 0


@dataclass
class BenchmarkRunConfig:
    methods: list[str] = field(default_factory=lambda: list(bench.METHODS))
    replicates: int = 30
    n_T: int = 5
    n_S: int = 20
    n_o: int = 20
    batches: int = 4
    noise_sd: float = 0.1
    objective_transform: list[float] = field(default_factory=lambda: [0.75, 0.4, 0.8])
    constraint_transform: list[float] = field(default_factory=lambda: [1.25, 0.8, 4.0])
    threshold: float = 1.25
    anchor_count: int = 5
    fit_restarts: int = 3
    acq_restarts: int = 10
    raw_samples: int = 128
    qmc_samples: int = 64
    thompson_draws: int = 1000
    seed: int = 0


@dataclass
class LearningCurveConfig:
    """Without ``data`` a two-task ICM dataset is sampled from the generative fields."""

    data: str = ""
    grid: list[list[int]] = field(default_factory=lambda: [[2, 0], [2, 90], [10, 0], [10, 90], [18, 0]])
    single_task_grid: list[int] = field(default_factory=list)
    replicates: int = 500
    restarts: int = 3
    fixed_kernel: bool = False
    n_online: int = 20
    n_offline: int = 100
    dim: int = 10
    rho: float = 0.9
    lengthscale: float = 1.0
    noise_var: float = 0.01
    seed: int = 0


@dataclass
class BoundCheckConfig:
    instances: int = 500
    dim: int = 3
    max_points: int = 8
    seed: int = 0


HELP = {
    "fit": "fit a GP / multi-task GP to a dataset JSON and write its summary",
    "loo": "leave-one-out cross-validation on one task of a dataset",
    "optimize": "run the online/offline loop on the synthetic problem",
    "benchmark": "compare single-task, init-only and full multi-task optimization",
    "learning-curve": "empirical learning curves (generated data unless a dataset is given)",
    "bound-check": "randomized check of the two-task variance lower bound",
}

SUBCOMMANDS = {
    "fit": FitConfig,
    "loo": LooConfig,
    "optimize": OptimizeConfig,
    "benchmark": BenchmarkRunConfig,
    "learning-curve": LearningCurveConfig,
    "bound-check": BoundCheckConfig,
}


@dataclass
class RunConfig:
    subcommand: str
    params: object
    out: str = "out"
    threads: int = 1


# --- strict parsing --------------------------------------------------------


def _type_name(tp):
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        for arm in typing.get_args(tp):
            try:
                return _coerce(value, arm, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: expected {tp}, got {type(value).__name__}")
    if tp is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null, got {type(value).__name__}")
        return None
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected str, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported type {_type_name(tp)}")


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _flag(name):
    return "--" + name.replace("_", "-")


def _flag_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_params(cls, file_values=None, flag_values=None):
    """Defaults, then file values, then flag values; unknown keys and type errors raise ConfigError."""
    hints = typing.get_type_hints(cls)
    values = {}
    for source, prefix in ((file_values or {}, "config"), (flag_values or {}, "flag")):
        for key, raw in source.items():
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
            path = f"{prefix}.{key}" if prefix == "config" else _flag(key)
            values[key] = _coerce(raw, hints[key], path)
    params = cls(**values)
    seed = getattr(params, "seed", 0)
    if not 0 <= seed < SEED_MAX:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return params


def make_parser():
    parser = argparse.ArgumentParser(prog="mtbo", description="Multi-task Bayesian optimization experiments.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, cls in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker process cap")
        for f in dataclasses.fields(cls):
            p.add_argument(_flag(f.name), dest=f"param_{f.name}", type=_flag_value, default=None, metavar="VALUE")
    return parser


def parse_config(argv) -> RunConfig:
    args = make_parser().parse_args(argv)
    cls = SUBCOMMANDS[args.subcommand]
    file_values = _load_json(args.config) if args.config else {}
    flags = {k[len("param_"):]: v for k, v in vars(args).items() if k.startswith("param_") and v is not None}
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return RunConfig(args.subcommand, build_params(cls, file_values, flags), args.out, args.threads)


# --- outputs ---------------------------------------------------------------


class Outputs:
    """Writes files into one directory as ``name.partial`` and renames them on :meth:`commit`."""

    def __init__(self, directory):
        self.directory = directory
        self.pending = []
        os.makedirs(directory, exist_ok=True)

    def path(self, name):
        return os.path.join(self.directory, name)

    def open(self, name):
        self.pending.append(name)
        return open(self.path(name) + ".partial", "w", encoding="utf-8", newline="\n")

    def write(self, name, text):
        with self.open(name) as fh:
            fh.write(text)

    def commit(self):
        for name in self.pending:
            os.replace(self.path(name) + ".partial", self.path(name))
        self.pending = []


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_dataset(path):
    if not path:
        raise ConfigError("data: a dataset path is required")
    try:
        with open(path, encoding="utf-8") as fh:
            return Dataset.from_json(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror}") from exc


def _run_fit(cfg: FitConfig, out: Outputs, threads):
    ds = _read_dataset(cfg.data)
    model = fit(ds, rank=cfg.rank, restarts=cfg.restarts, seed=cfg.seed, standardize=cfg.standardize)
    summary = model.summary()
    summary["hyperparameters"] = model.theta.tolist()
    out.write("model.json", _json(summary))


def _run_loo(cfg: LooConfig, out: Outputs, threads):
    ds = _read_dataset(cfg.data)
    res = loo_cross_validation(ds, cfg.target_task, cfg.rank, cfg.restarts, cfg.seed)
    lines = ["index,actual,mean,variance"]
    for i, (a, m, v) in enumerate(zip(res.actual, res.mean, res.variance)):
        lines.append(f"{i},{float(a)!r},{float(m)!r},{float(v)!r}")
    out.write("loo.csv", "\n".join(lines) + "\n")
    out.write("loo.json", _json({"mse": float(res.mse), "n": len(res.actual), "target_task": cfg.target_task}))


def _problem(cfg):
    return bench.synthetic_problem(cfg.noise_sd, bench.BiasTransform(*cfg.objective_transform),
                                   bench.BiasTransform(*cfg.constraint_transform), cfg.threshold)


def _check_transform(values, name):
    if len(values) != 3:
        raise ConfigError(f"{name}: expected [m, alpha1, alpha2]")


def _run_optimize(cfg: OptimizeConfig, out: Outputs, threads):
    _check_transform(cfg.objective_transform, "objective_transform")
    _check_transform(cfg.constraint_transform, "constraint_transform")
    names = {f.name for f in dataclasses.fields(LoopConfig)}
    loop_cfg = LoopConfig(**{k: v for k, v in dataclasses.asdict(cfg).items() if k in names})
    with out.open("trace.jsonl") as fh:
        def on_record(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()
        trace = run_loop(_problem(cfg), loop_cfg, on_record)
    out.write("best_feasible.csv", trace.best_feasible_csv())
    out.write("result.json", _json({"best_point": trace.best_point, "best_value": trace.best_value,
                                    "online_observations": sum(len(r.policies) for r in trace.online_records())}))


def _run_benchmark(cfg: BenchmarkRunConfig, out: Outputs, threads):
    _check_transform(cfg.objective_transform, "objective_transform")
    _check_transform(cfg.constraint_transform, "constraint_transform")
    values = dataclasses.asdict(cfg)
    values["methods"] = tuple(cfg.methods)
    values["objective_transform"] = tuple(cfg.objective_transform)
    values["constraint_transform"] = tuple(cfg.constraint_transform)
    bcfg = bench.BenchmarkConfig(**values)
    result = bench.run_comparison(bcfg, threads=threads)
    out.write("benchmark.csv", result.csv())
    out.write("summary.json", bench.summary_json(result, bcfg) + "\n")


def _run_learning_curve(cfg: LearningCurveConfig, out: Outputs, threads):
    spatial = SpatialHyperparams(1.0, np.full(cfg.dim, cfg.lengthscale))
    fixed = None
    if cfg.data:
        ds = _read_dataset(cfg.data)
    else:
        ds = analysis.sample_icm_dataset(cfg.n_online, cfg.n_offline, cfg.dim, cfg.rho, spatial, cfg.noise_var,
                                         cfg.seed)
        if cfg.fixed_kernel:
            fixed = (spatial, analysis.correlation_covariance(cfg.rho))
    if cfg.fixed_kernel and fixed is None:
        raise ConfigError("fixed_kernel needs generated data")
    grid = [tuple(g) for g in cfg.grid]
    if any(len(g) != 2 for g in grid):
        raise ConfigError("grid: expected [n_T, n_S] pairs")
    points = analysis.empirical_learning_curve(ds, grid, cfg.replicates, cfg.seed, fixed=fixed,
                                               restarts=cfg.restarts)
    out.write("learning_curve.csv", analysis.curve_csv(points))
    if cfg.single_task_grid:
        offline = ds.subset(np.flatnonzero(ds.tasks == 1))
        st = analysis.single_task_learning_curve(offline, cfg.single_task_grid, cfg.replicates, cfg.seed,
                                                 fixed=fixed, restarts=cfg.restarts)
        lines = ["n,mean_var,var_se"] + [f"{n},{v!r},{s!r}" for n, v, s in zip(st.n, st.mean_variance, st.stderr)]
        out.write("single_task_curve.csv", "\n".join(lines) + "\n")
        if fixed is not None:
            rho = cfg.rho
        else:
            full = fit(ds, restarts=cfg.restarts, seed=cfg.seed, structure=analysis.TWO_TASK)
            rho = inter_task_correlation(full, 0, 1)
        rows = []
        for p in points:
            try:
                rows.append((p.n_S, p.mean_predictive_variance, analysis.chai_bound(st, rho, p.n_T, p.n_S)))
            except ValueError:
                continue
        out.write("bound.csv", analysis.bound_csv(rows))


def _run_bound_check(cfg: BoundCheckConfig, out: Outputs, threads):
    results = analysis.proposition_battery(cfg.instances, cfg.dim, cfg.seed, cfg.max_points)
    lines = ["instance,lhs,rhs,holds"] + [f"{i},{l!r},{r!r},{int(h)}" for i, (l, r, h) in enumerate(results)]
    out.write("bound_check.csv", "\n".join(lines) + "\n")
    violations = sum(not h for _, _, h in results)
    out.write("bound_check.json", _json({"instances": len(results), "violations": violations}))
    print(f"violations: {violations} / {len(results)}")
    return 1 if violations else 0


RUNNERS = {
    "fit": _run_fit,
    "loo": _run_loo,
    "optimize": _run_optimize,
    "benchmark": _run_benchmark,
    "learning-curve": _run_learning_curve,
    "bound-check": _run_bound_check,
}


def dispatch(config: RunConfig) -> int:
    out = Outputs(config.out)
    out.write("effective_config.json", _json(dataclasses.asdict(config.params)))
    out.commit()
    try:
        status = RUNNERS[config.subcommand](config.params, out, config.threads) or 0
    except Exception as exc:
        err = {"subcommand": config.subcommand, "error": type(exc).__name__, "message": str(exc)}
        with open(out.path("error.json"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_json(err))
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out.commit()
    return status


def main(argv=None) -> int:
    try:
        config = parse_config(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return dispatch(config)


if __name__ == "__main__":
    sys.exit(main())
