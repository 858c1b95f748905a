"""Command line entry point: ``bowlrp <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import yaml

from . import stats as st
from .pipeline import ConfigError, PipelineConfig, StageError, load_config, run_pipeline, task_template

STAGE_OF = {"extract": "extract", "codebook": "codebook", "gram": "gram", "train": "train", "cv": "train",
            "heatmap": "heatmap", "run": None}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--task", choices=("cancer", "lymphocyte", "molecular", "survival", "synthetic"))
    p.add_argument("--seed", type=int)
    p.add_argument("--run-dir")
    p.add_argument("--cache-dir")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--kernel", choices=("hik", "chi2"))
    p.add_argument("--cv-mode", choices=("select", "fixed", "nested", "survival"))
    p.add_argument("--C", type=float, dest="C")
    p.add_argument("--heatmap-limit", type=int)
    p.add_argument("--no-heatmaps", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; VALUE is parsed as YAML")


def build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else task_template(args.task or "synthetic")
    if args.task and args.config and args.task != cfg.task:
        raise ConfigError(f"--task {args.task} conflicts with config task {cfg.task}")
    updates = {}
    for key in ("seed", "run_dir", "cache_dir", "images", "labels", "test_images", "test_labels",
                "n_train", "n_test", "kernel", "cv_mode", "C", "heatmap_limit"):
        v = getattr(args, key)
        if v is not None:
            updates[key] = v
    if args.no_heatmaps:
        updates["heatmaps"] = False
    known = set(PipelineConfig.__dataclass_fields__)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        updates[k] = yaml.safe_load(v)
    return replace(cfg, **updates) if updates else cfg


def cmd_synth(args) -> int:
    from .synthetic import build_dataset, export_dataset

    data = build_dataset(args.n_train, args.n_test, args.seed)
    root = export_dataset(data, args.out)
    print(f"wrote {len(data.train)} training and {len(data.test)} test scenes to {root}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = build_config(args)
    res = run_pipeline(cfg, STAGE_OF[args.command])
    for k, v in res.metrics.items():
        print(f"{k}\t{st.format_value(v)}")
    print(f"outputs in {res.run_dir}")
    return 0


def cmd_stats(args) -> int:
    if args.test == "hoeffding":
        r = st.hoeffding_pvalue(args.bac, args.n, args.q)
        print(f"p\t{st.format_value(r.p)}\nlog10_p\t{st.format_value(r.log10_p)}\nn_eff\t{st.format_value(r.n_eff)}")
    elif args.test == "bh":
        r = st.benjamini_hochberg(args.p, args.alpha)
        for p, t, up, lit in zip(r.pvalues, r.thresholds, r.step_up, r.first_violation):
            print(f"{st.format_value(p)}\t{st.format_value(t)}\t{up}\t{lit}")
    elif args.test == "quadrat":
        a, b, c, d = args.table
        r = st.chi2_from_table(st.QuadratTable(a, b, c, d))
        p = f"< 1e-300 (log10 {r.log10_p:.2f})" if r.p == 0.0 else st.format_value(r.p)
        print(f"chi2\t{r.statistic:.4f}\np\t{p}\nr_cl\t{st.format_value(r.extra['r_cl'])}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bowlrp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and export a synthetic shapes dataset")
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    helps = {"extract": "compute local descriptors", "codebook": "train visual vocabularies",
             "gram": "encode BoW histograms and build kernel matrices", "train": "fit and evaluate the SVM",
             "cv": "cross-validation (alias of train for nested/survival modes)",
             "heatmap": "train, then write relevance heatmaps and quadrat statistics", "run": "full pipeline"}
    for name, h in helps.items():
        p = sub.add_parser(name, help=h)
        _add_config_flags(p)
        p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("stats", help="standalone statistical tests")
    ts = p.add_subparsers(dest="test", required=True)
    q = ts.add_parser("hoeffding")
    q.add_argument("--bac", type=float, required=True)
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--q", type=float, default=0.5)
    q = ts.add_parser("bh")
    q.add_argument("p", type=float, nargs="+")
    q.add_argument("--alpha", type=float, default=0.05)
    q = ts.add_parser("quadrat")
    q.add_argument("table", type=int, nargs=4, metavar="N",
                   help="counts: both, morphology only, molecular only, neither")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
