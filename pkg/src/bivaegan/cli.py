"""Command-line entry point: ``bivaegan {gen-data,train,eval,prior,norm-exp}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import warnings
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import ConfigError, TrainConfig
from .dataspace import (
    ClassPrior,
    DatasetError,
    SyntheticSpec,
    empirical_class_prior,
    load_dataset,
    make_synthetic_tzsl,
    normalize_dataset,
    save_dataset,
)
from .evaluation import EvalReport, _jsonable, gtzsl_evaluate, infer_in_space, tzsl_evaluate
from .nets import load_checkpoint, save_checkpoint
from .prior import SingularConfusionError, bbse_estimate, cpe_estimate, prior_tv_distance, uniform_prior
from .train import ground_truth_prior, pretune_features, run_pipeline

# Run-config keys beyond the TrainConfig fields.
RUN_KEYS = {
    "data": None,             # dataset directory; omit to use the synthetic generator
    "synthetic": None,        # SyntheticSpec overrides
    "data_seed": 0,
    "normalization": "l2",
    "pretune": False,
    "out": None,
}
SPACES = ("attribute", "hidden", "visual", "concatenated")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config handling

@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    data: str | None = None
    synthetic: dict = dataclasses.field(default_factory=dict)
    data_seed: int = 0
    normalization: str = "l2"
    pretune: bool = False
    out: str | None = None

    def to_dict(self) -> dict:
        spec = dataclasses.asdict(SyntheticSpec(**self.synthetic))
        return {**self.train.to_dict(), "data": self.data, "synthetic": spec, "data_seed": self.data_seed,
                "normalization": self.normalization, "pretune": self.pretune, "out": self.out}


def parse_run_config(data: dict) -> RunConfig:
    """Strict parse: any key that is neither a run key nor a TrainConfig field is rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in data:
        if key not in train_keys and key not in RUN_KEYS:
            raise ConfigError(f"unknown config key {key!r}", key)
    synthetic = data.get("synthetic") or {}
    spec_keys = {f.name for f in dataclasses.fields(SyntheticSpec)}
    for key in synthetic:
        if key not in spec_keys:
            raise ConfigError(f"unknown config key 'synthetic.{key}'", f"synthetic.{key}")
    if data.get("normalization", "l2") not in ("l2", "minmax", "none"):
        raise ConfigError("normalization must be 'l2', 'minmax' or 'none'", "normalization")
    train = TrainConfig.from_dict({k: v for k, v in data.items() if k in train_keys})
    run = {k: data.get(k, default) for k, default in RUN_KEYS.items()}
    run["synthetic"] = dict(synthetic)
    return RunConfig(train=train, **run)


def _load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.precision is not None:
        raw["precision"] = args.precision
    return parse_run_config(raw)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or (cfg.out if cfg else None)
    if not out:
        raise UsageError("an output directory is required (--out or 'out' in the config)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(cfg: RunConfig, data_dir: str | None = None, normalize: bool = True):
    """Load the configured dataset (directory or synthetic), normalized unless ``normalize`` is off."""
    r = cfg.train.radius
    source = data_dir or cfg.data
    mode = cfg.normalization if normalize else None
    if source:
        return load_dataset(source, normalization=mode, r=r)
    raw = make_synthetic_tzsl(SyntheticSpec(**cfg.synthetic), cfg.data_seed)
    return raw if mode is None else normalize_dataset(raw, mode, r)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        writer.writerows(rows)


def _echo(report: EvalReport, cfg: RunConfig) -> EvalReport:
    report.config = cfg.to_dict()
    return report


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec_kw = dict(cfg.synthetic)
    for f in dataclasses.fields(SyntheticSpec):
        value = getattr(args, f"spec_{f.name}", None)
        if value is not None:
            spec_kw[f.name] = value
    spec = SyntheticSpec(**spec_kw)
    seed = cfg.train.seed if args.seed is not None else cfg.data_seed
    ds = make_synthetic_tzsl(spec, seed)
    out = _out_dir(args, cfg)
    save_dataset(ds, out)
    summary = {
        "path": str(out),
        "seed": seed,
        "seen_class_counts": np.bincount(ds.seen_labels, minlength=ds.num_seen).tolist(),
        "unseen_class_counts": np.bincount(ds.unseen_labels_eval, minlength=ds.num_unseen).tolist(),
        "unseen_prior": empirical_class_prior(ds.unseen_labels_eval, ds.num_unseen).tolist(),
        "spec": dataclasses.asdict(spec),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    ds = _dataset(cfg)
    if cfg.pretune:
        ds = pretune_features(ds, cfg.train)
    tc = cfg.train
    log_path, prior_path = out / "train_log.jsonl", out / "prior_snapshots.jsonl"
    current_tv = {"prior_tv_error": None}
    with log_path.open("w") as log_fh, prior_path.open("w") as prior_fh:
        def logger(row):
            if row.get("event") == "prior":
                current_tv["prior_tv_error"] = row["tv_error"]
                prior_fh.write(json.dumps(row, sort_keys=True) + "\n")
            else:
                row = {**row, **current_tv}
            log_fh.write(json.dumps(row, sort_keys=True) + "\n")

        def on_epoch_end(state):
            if tc.checkpoint_every and state.epoch % tc.checkpoint_every == 0:
                save_checkpoint(state.models, out / "checkpoints" / f"epoch_{state.epoch:04d}",
                                {"epoch": state.epoch, "prior": state.prior.tolist()}, tc.precision)

        state, report = run_pipeline(ds, tc, logger=logger, on_epoch_end=on_epoch_end)
    save_checkpoint(state.models, out / "checkpoint", {"epoch": state.epoch, "prior": state.prior.tolist(),
                                                       "config": cfg.to_dict()}, tc.precision)
    _write_json(out / "config.json", cfg.to_dict())
    (out / "report.json").write_text(_echo(report, cfg).to_json() + "\n")
    _write_csv(out / "report.csv", [report.csv_row()], EvalReport.CSV_FIELDS)
    print(json.dumps({"acc_unseen": report.acc_unseen, "prior_tv_error": report.prior_tv_error,
                      "out": str(out)}, sort_keys=True))
    return 0


def _restore(args, cfg: RunConfig):
    models, extra = load_checkpoint(args.checkpoint, cfg.train.dtype)
    ds = _dataset(cfg, args.data)
    g, r = models.generator, models.regressor
    if g.out_dim != ds.feature_dim or r.in_dim != ds.feature_dim:
        raise UsageError(f"checkpoint feature dim {g.out_dim} does not match dataset feature dim {ds.feature_dim}")
    if r.out_dim != ds.attribute_dim:
        raise UsageError(
            f"checkpoint attribute dim {r.out_dim} does not match dataset attribute dim {ds.attribute_dim}")
    prior = extra.get("prior")
    state = SimpleNamespace(models=models, prior=None if prior is None else ClassPrior(np.asarray(prior)))
    return state, ds


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    state, ds = _restore(args, cfg)
    tc = cfg.train
    if args.mode == "tzsl":
        reports = [tzsl_evaluate(state, ds, tc)]
    elif args.mode == "gtzsl":
        reports = [gtzsl_evaluate(state, ds, tc)]
    else:
        reports = [infer_in_space(state, ds, "attribute", "nearest_attribute", tc)]
        reports += [infer_in_space(state, ds, space, "classifier", tc) for space in SPACES]
    truth = ground_truth_prior(ds)
    for rep in reports:
        _echo(rep, cfg)
        if truth is not None and state.prior is not None:
            rep.prior = state.prior.tolist()
            rep.prior_tv_error = prior_tv_distance(state.prior, truth)
    payload = reports[0].to_dict() if len(reports) == 1 else {"reports": [r.to_dict() for r in reports]}
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    (out / f"eval_{args.mode}.json").write_text(text + "\n")
    _write_csv(out / f"eval_{args.mode}.csv", [r.csv_row() for r in reports], EvalReport.CSV_FIELDS)
    print(text)
    return 0


def trial_seed(seed: int, trial: int) -> int:
    """Independent stream per (seed, trial)."""
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


def cmd_prior(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    state, ds = _restore(args, cfg)
    tc = cfg.train
    truth = ground_truth_prior(ds)
    trials = []
    for i in range(args.trials):
        seed = trial_seed(tc.seed, i)
        row = {"trial": i, "seed": seed, "method": args.method, "prior": None, "tv_error": None, "error": None}
        try:
            if args.method == "uniform":
                est = uniform_prior(ds.num_unseen)
            else:
                fn = cpe_estimate if args.method == "cpe" else bbse_estimate
                est = fn(state.models.generator, ds.unseen_features, ds.unseen_attributes,
                         tc.synth_per_class_train, seed, tc)
            row["prior"] = est.tolist()
            if truth is not None:
                row["tv_error"] = prior_tv_distance(est, truth)
        except SingularConfusionError as exc:
            row["error"] = str(exc)
        trials.append(row)
    with (out / f"prior_{args.method}_trials.jsonl").open("w") as fh:
        for row in trials:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tvs = [r["tv_error"] for r in trials if r["tv_error"] is not None]
    summary = {
        "method": args.method,
        "trials": args.trials,
        "failed_trials": sum(r["error"] is not None for r in trials),
        "true_prior": None if truth is None else truth.tolist(),
        "tv_error_mean": float(np.mean(tvs)) if tvs else None,
        "tv_error_std": float(np.std(tvs)) if tvs else None,
        "config": cfg.to_dict(),
    }
    _write_json(out / f"prior_{args.method}.json", summary)
    print(json.dumps({k: summary[k] for k in ("method", "tv_error_mean", "tv_error_std", "failed_trials")},
                     sort_keys=True))
    return 0


def cmd_norm_exp(args) -> int:
    from .normexp import norm_experiment

    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    raw = _dataset(cfg, normalize=False)
    result = norm_experiment(raw, cfg.train, args.epochs)
    hist = result["histograms"]
    _write_csv(out / "norm_histograms.csv",
               [dict(zip(hist, vals)) for vals in zip(*(np.asarray(v).tolist() for v in hist.values()))], hist)
    curves = result["curves"]
    _write_csv(out / "norm_accuracy.csv", [dict(zip(curves, vals)) for vals in zip(*curves.values())], curves)
    _write_json(out / "norm_report.json", {"summary": result["summary"], "config": cfg.to_dict()})
    print(json.dumps(result["summary"], sort_keys=True))
    return 0


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (strict keys)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))

    parser = _Parser(prog="bivaegan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    for f in dataclasses.fields(SyntheticSpec):
        kind = float if "float" in str(f.type) else int
        if f.name in ("seen_per_class", "unseen_per_class"):
            gen.add_argument(f"--{f.name.replace('_', '-')}", dest=f"spec_{f.name}", type=_int_list)
        else:
            gen.add_argument(f"--{f.name.replace('_', '-')}", dest=f"spec_{f.name}", type=kind)
    gen.set_defaults(func=cmd_gen_data)

    sub.add_parser("train", parents=[common], help="run the full pipeline").set_defaults(func=cmd_train)

    helps = {"eval": "evaluate a checkpoint", "prior": "repeated prior-estimation trials"}
    for name, func in (("eval", cmd_eval), ("prior", cmd_prior)):
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory (defaults to the config's dataset)")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--mode", choices=("tzsl", "gtzsl", "spaces"), default="tzsl")
        else:
            p.add_argument("--method", choices=("cpe", "bbse", "uniform"), default="cpe")
            p.add_argument("--trials", type=int, default=5)

    ne = sub.add_parser("norm-exp", parents=[common], help="L2 vs. Min-Max normalization comparison")
    ne.add_argument("--epochs", type=int, help="defaults to epochs_transductive")
    ne.set_defaults(func=cmd_norm_exp)
    return parser


def _int_list(text: str):
    parts = [int(x) for x in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        key = getattr(exc, "key", None)
        print(f"error: {exc}" + (f" [key: {key}]" if key else ""), file=sys.stderr)
        return 1
    except (DatasetError, FileNotFoundError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
