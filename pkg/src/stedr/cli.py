"""Command-line entry point: gen, train, eval, emulate, screen, report.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
Every invocation writes one JSON manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, data as datamod, metrics
from .errors import IneligibleDrug, InvalidArgument, InvalidConfig, StedrError
from .prediction import TrainConfig, as_causal_data, predict, train

log = logging.getLogger("stedr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str = None
    seed: int = None
    inputs: dict = field(default_factory=dict)     # path -> sha256
    outputs: dict = field(default_factory=dict)    # path -> sha256
    config: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def sha256_file(path):
    return checkpoint.file_digest(path)


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_json(path):
    _require_file(path, "config file")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- config flags

def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_split(text):
    return tuple(float(v) for v in text.split(","))


_FIELD_HELP = {
    "K": "number of subgroups",
    "alpha": "overlap penalty strength, within [0.1, 0.5]",
    "learning_rate": "optimizer step size",
    "batch_size": "mini-batch size",
    "max_epochs": "epoch limit",
    "patience": "early-stopping patience in epochs",
    "hidden": "hidden width of the encoder and heads",
    "latent_dim": "latent Gaussian width (0 means equal to hidden)",
    "transformer_layers": "transformer encoder layers",
    "head_layers": "hidden layers per prediction head",
    "attention_heads": "self-attention heads",
    "t_max": "visits kept per patient (most recent)",
    "outcome_kind": "continuous or binary",
    "iptw_mode": "literal_sum or treatment_conditional",
    "propensity_clip": "propensity clipping bound",
    "ablate_gmm": "drop the subgroup mixture",
    "ablate_attention": "drop covariate/visit attention",
    "seed": "random seed",
    "split": "train,val,test fractions",
    "mc_samples": "Monte-Carlo draws for the mixture KL",
    "optimizer": "adam or sgd",
    "dtype": "float64 or float32",
    "early_stop_metric": "total or factual validation loss",
    "standardize_inputs": "standardize inputs on the training split",
    "standardize_outcome": "standardize continuous outcomes on the training split",
    "allow_alpha_override": "permit alpha outside [0.1, 0.5]",
    "detach_target": "treat the sharpened target distribution as a constant",
    "subgroup_init": "kmeans or random initialization of the local encoders",
    "warmup_epochs": "epochs before the k-means subgroup initialization",
    "rescale_attention": "scale the attention-weighted input by T*M",
}


def add_train_flags(parser):
    group = parser.add_argument_group("training configuration (overrides --config)")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            kind = _parse_bool
        elif f.name == "split":
            kind = _parse_split
        elif f.type in ("int", int):
            kind = int
        elif f.type in ("float", float):
            kind = float
        else:
            kind = str
        dest = "cfg_" + f.name
        if f.name == "seed":
            continue  # --seed is a top-level flag on every command
        group.add_argument(flag, dest=dest, type=kind, default=None, metavar=f.name.upper(),
                           help=f"{_FIELD_HELP.get(f.name, f.name)} (default {f.default!r})")


def resolve_train_config(args, base=None):
    """Defaults < config file < flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(_load_json(args.config))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------- commands

def cmd_gen(args, manifest):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    gen = args.generator
    manifest.seed = args.seed
    if gen == "claims":
        from .emulation.claims import ClaimsConfig, generate_claims, write_claims

        values = _load_json(args.config) if args.config else {}
        if args.n is not None:
            values["n_patients"] = args.n
        values["seed"] = args.seed
        cfg = ClaimsConfig.from_dict(values)
        db, catalog = generate_claims(cfg)
        oracle = args.oracle or str(out) + ".oracle.jsonl"
        write_claims(db, catalog, out, oracle)
        manifest.config = cfg.to_dict()
        outputs = [out, str(out) + ".meta.json", oracle]
    else:
        if args.n is None and gen != "ihdp":
            raise UsageError("--n is required for this generator")
        if gen == "a":
            ds = datamod.generate_synthetic_a(args.n, args.seed)
        elif gen == "b":
            ds = datamod.generate_synthetic_b(args.n, args.seed)
        elif args.covariates:
            X, t, names = datamod.read_covariate_csv(_require_file(args.covariates, "covariate table"))
            if t is None:
                raise InvalidConfig("covariate table needs a 'treatment' column")
            ds = datamod.simulate_response_surface_b(X, t, args.seed, names)
            manifest.inputs[args.covariates] = sha256_file(args.covariates)
        else:
            ds = datamod.generate_ihdp_like(args.seed)
        datamod.write_jsonl(ds, out)
        outputs = [out, datamod.meta_path(out)]
        manifest.config = {"generator": gen, "n": len(ds), "seed": args.seed}
    manifest.outputs = {str(p): sha256_file(p) for p in outputs}
    return str(out) + ".manifest.json"


def cmd_train(args, manifest):
    cfg = resolve_train_config(args)
    ds = datamod.read_jsonl(_require_file(args.data, "data file"))
    model = train(ds, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out)
    hist = Path(str(out) + ".history.json")
    hist.write_text(json.dumps({"best_epoch": model.best_epoch, "epochs": model.history},
                               indent=1, sort_keys=True) + "\n")
    manifest.seed, manifest.config = cfg.seed, cfg.to_dict()
    manifest.config_path = args.config
    manifest.inputs = {args.data: sha256_file(args.data)}
    manifest.outputs = {str(out): sha256_file(out), str(hist): sha256_file(hist)}
    return str(out) + ".manifest.json"


def evaluate(model, ds, split="all"):
    """Metrics dict for a dataset; effect metrics when true outcomes are present."""
    cd = as_causal_data(ds, model.t_max)
    if split != "all":
        if split not in model.split:
            raise InvalidArgument(f"unknown split {split!r}")
        cd = cd.take(model.split[split])
    pred = predict(model, cd)
    scale = model.y_scale if model.config.outcome_kind == "continuous" else 1.0
    out = {"n": len(cd), "split": split, "outcome_units": "standardized" if scale != 1.0 else "raw"}
    factual = np.where(cd.t == 1, pred["y1_hat"], pred["y0_hat"])
    y = cd.y if scale == 1.0 else (cd.y - model.y_mean) / scale
    out["factual_mse"] = float(np.mean((factual - y) ** 2))
    if cd.mu0 is not None and np.all(np.isfinite(cd.true_effect)):
        rep = metrics.effect_report(pred["tau_hat"], cd.true_effect / scale, pred["subgroup"],
                                    model.config.K, raw_tau_hat=pred["tau_hat"] * scale)
        out.update(rep)
    return out


def cmd_eval(args, manifest):
    model = checkpoint.load(_require_file(args.model, "model checkpoint"))
    ds = datamod.read_jsonl(_require_file(args.data, "data file"))
    report = evaluate(model, ds, args.split)
    out = Path(args.out or str(args.model) + ".metrics.json")
    metrics.dump_report(report, out)
    manifest.seed = model.config.seed
    manifest.config = {"split": args.split}
    manifest.inputs = {args.model: sha256_file(args.model), args.data: sha256_file(args.data)}
    manifest.outputs = {str(out): sha256_file(out)}
    print(json.dumps(report, sort_keys=True))
    return str(out) + ".manifest.json"


def _claims(args):
    from .emulation.claims import read_claims

    return read_claims(_require_file(args.claims, "claims file"))


def _criteria(args):
    from .emulation.cohort import Criteria

    return Criteria(min_cases=args.min_cases) if args.min_cases is not None else Criteria()


def cmd_emulate(args, manifest):
    from .emulation.cohort import CohortIndex, TrialSpec, build_trial
    from .emulation.screen import attention_summary, trial_seed, write_heatmap
    from .emulation.trial import emulation_config

    db, catalog = _claims(args)
    cfg = resolve_train_config(args, emulation_config().to_dict())
    seed = trial_seed(args.seed, args.drug, args.trial_index)
    cfg = dataclasses.replace(cfg, seed=seed % (2 ** 31))
    spec = TrialSpec(args.drug, args.trial_index, args.mode, seed)
    index = CohortIndex(db, catalog, _criteria(args))
    build_trial(db, catalog, spec, index=index)
    from .emulation.trial import emulate_trial

    result, model, causal, order = emulate_trial(db, spec, cfg, keep_model=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trial_json = out / "trial.json"
    d = result.to_dict()
    d["digest"] = result.digest()
    trial_json.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    ckpt = out / "model.ckpt"
    checkpoint.save(model, ckpt)
    heat = out / "attention.csv"
    write_heatmap(attention_summary(model, causal), heat, order=order)
    manifest.seed, manifest.config = args.seed, cfg.to_dict()
    manifest.inputs = {args.claims: sha256_file(args.claims)}
    manifest.outputs = {str(p): sha256_file(p) for p in (trial_json, ckpt, heat)}
    return str(out / "manifest.json")


def _drug_list(text, catalog):
    if text == "all":
        return sorted(catalog.drugs)
    try:
        drugs = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--drugs expects comma-separated ids or 'all', got {text!r}") from exc
    missing = [d for d in drugs if d not in catalog.drugs]
    if missing:
        raise InvalidConfig(f"unknown drug ids {missing}")
    return drugs


def cmd_screen(args, manifest):
    from .emulation.screen import run_screen, write_screen
    from .emulation.trial import emulation_config

    db, catalog = _claims(args)
    cfg = resolve_train_config(args, emulation_config().to_dict())
    if args.n_trials < 2:
        raise InvalidConfig("--n-trials must be at least 2")
    report = run_screen(db, catalog, _drug_list(args.drugs, catalog), cfg, args.n_trials,
                        seed=args.seed, criteria=_criteria(args), workers=args.workers,
                        two_sided=args.two_sided)
    paths = write_screen(report, args.out)
    digest_path = Path(args.out) / "screen.digest"
    digest_path.write_text(report.digest() + "\n")
    manifest.seed, manifest.config = args.seed, report.config
    manifest.inputs = {args.claims: sha256_file(args.claims)}
    manifest.outputs = {str(p): sha256_file(p) for p in [*paths.values(), digest_path]}
    for d in report.drugs:
        print(f"drug {d.drug}: {d.verdict} ({d.n_balanced_trials}/{d.n_trials} balanced)")
    return str(Path(args.out) / "manifest.json")


def cmd_report(args, manifest):
    from . import figures

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.screen:
        table = Path(args.screen) / "drug_reports.csv"
        _require_file(table, "screen table")
        manifest.inputs[str(table)] = sha256_file(table)
        forests = figures.forest_plots(table, out, args.format)
        if not forests and not args.heatmap:
            raise UsageError(f"{table}: no drug has a finite estimate to plot")
        written += forests
    if args.heatmap:
        _require_file(args.heatmap, "heatmap table")
        manifest.inputs[args.heatmap] = sha256_file(args.heatmap)
        written.append(figures.attention_heatmap(args.heatmap, out / f"attention.{args.format}",
                                                 top=args.top))
    if not written:
        raise UsageError("nothing to render: pass --screen and/or --heatmap")
    manifest.outputs = {str(p): sha256_file(p) for p in written}
    return str(out / "manifest.json")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="stedr", description="Subgroup-aware treatment effect estimation and "
                                          "drug-repurposing trial emulation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset or claims corpus")
    g.add_argument("--generator", required=True, choices=("a", "b", "ihdp", "claims"),
                   help="a: static synthetic, b: autoregressive sequences, ihdp: response "
                        "surface on IHDP-shaped covariates, claims: synthetic claims corpus")
    g.add_argument("--n", type=int, help="number of samples (patients for claims)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--out", required=True, help="output JSON-Lines path")
    g.add_argument("--config", help="claims generator config JSON")
    g.add_argument("--oracle", help="oracle sidecar path for claims (default OUT.oracle.jsonl)")
    g.add_argument("--covariates", help="ihdp: CSV covariate table with a 'treatment' column")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True, help="dataset JSON-Lines file")
    t.add_argument("--config", help="TrainConfig JSON (field names as keys)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, help="random seed (overrides the config)")
    add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--model", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset JSON-Lines file")
    e.add_argument("--out", help="metrics JSON path (default MODEL.metrics.json)")
    e.add_argument("--split", default="all", choices=("all", "train", "val", "test"),
                   help="evaluate on the model's split of DATA (default all rows)")

    for name, helptext in (("emulate", "emulate one trial for one drug"),
                           ("screen", "emulate many trials per drug and screen")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--claims", required=True, help="claims corpus JSON-Lines file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--config", help="TrainConfig JSON for the per-trial models")
        s.add_argument("--seed", type=int, default=0, help="base seed for trial seeds (default 0)")
        s.add_argument("--min-cases", type=int, help="minimum eligible cases (default 100)")
        if name == "emulate":
            s.add_argument("--drug", type=int, required=True, help="case drug id")
            s.add_argument("--trial-index", type=int, default=0, help="trial index (default 0)")
            s.add_argument("--mode", default="random", choices=("random", "same_class"),
                           help="control sampling mode (default random)")
        else:
            s.add_argument("--drugs", default="all", help="comma-separated drug ids or 'all'")
            s.add_argument("--n-trials", type=int, default=100, help="trials per drug (default 100)")
            s.add_argument("--workers", type=int,
                           help="parallel processes (default $STEDR_THREADS or CPU count)")
            s.add_argument("--two-sided", action="store_true", help="two-sided p-values")
        add_train_flags(s)

    r = sub.add_parser("report", help="render static figures from screen/emulation CSVs")
    r.add_argument("--screen", help="screen output directory (reads drug_reports.csv)")
    r.add_argument("--heatmap", help="attention CSV written by emulate")
    r.add_argument("--out", required=True, help="figure directory")
    r.add_argument("--format", default="png", choices=("png", "svg", "pdf"),
                   help="figure format (default png)")
    r.add_argument("--top", type=int, default=15, help="heatmap rows to show (default 15)")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "emulate": cmd_emulate,
            "screen": cmd_screen, "report": cmd_report}


def execute(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"stedr: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv, getattr(args, "config", None))
    start = time.perf_counter()
    try:
        manifest_path = COMMANDS[args.command](args, manifest)
    except (UsageError, InvalidConfig, IneligibleDrug) as exc:
        print(f"stedr: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StedrError, ArithmeticError, OSError, ValueError, RuntimeError) as exc:
        print(f"stedr: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.wall_clock_seconds = round(time.perf_counter() - start, 3)
    manifest.write(manifest_path)
    return EXIT_OK


def main():
    sys.exit(execute())


if __name__ == "__main__":
    main()
