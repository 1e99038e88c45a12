"""Command-line interface.

Subcommands: gen-data (write a synthetic multi-domain benchmark),
train (fit one model), eval (score a checkpoint on a held-out domain),
ablate (run a grid or sweep from a key=value config file), and
inspect-bank (stream images through a bank and dump its state).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .bank import ImageBank
from .experiments import (
    RESULTS_COLUMNS,
    ExperimentConfig,
    evaluate_stream,
    run_experiment,
    summarize,
    sweep,
    write_results_csv,
    result_row,
    split_datasets,
)
from .network import load_checkpoint, save_checkpoint
from .synthdata import DEFAULT_STYLES, SceneSpec, build_benchmark, load_datasets, save_datasets
from .training import TrainConfig, train_model

__all__ = ["main", "parse_config_file"]


def _split_arg(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"split must look like 'n:m', got {text!r}")


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _cmd_gen_data(args) -> int:
    if args.domains > len(DEFAULT_STYLES):
        print(
            f"error: at most {len(DEFAULT_STYLES)} preset styles available, "
            f"requested {args.domains} domains",
            file=sys.stderr,
        )
        return 2
    spec = SceneSpec(seed=args.seed)
    datasets = build_benchmark(args.domains, args.per_domain, spec=spec, seed=args.seed)
    save_datasets(args.out, datasets)
    for ds in datasets:
        print(f"domain {ds.domain_id} ({ds.style_name}): {len(ds)} images")
    print(f"wrote {args.out}")
    return 0


def _cmd_train(args) -> int:
    datasets = load_datasets(args.data)
    sources, _ = split_datasets(datasets, args.holdout)
    config = TrainConfig(
        inner_lr=args.inner_lr,
        outer_lr=args.outer_lr,
        alpha=args.alpha,
        batch_size=args.batch_size,
        epochs=args.epochs,
        split=args.split,
        seed=args.seed,
    )
    params = train_model(sources, config, args.method, log_path=args.log)
    save_checkpoint(args.out, params)
    print(f"trained {args.method} on domains {[d.domain_id for d in sources]}, wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    datasets = load_datasets(args.data)
    _, target = split_datasets(datasets, args.holdout)
    outcome = evaluate_stream(
        params,
        target.images,
        target.masks,
        args.test,
        m=args.m,
        q=args.q,
        style_layer=args.style_layer,
    )
    row = result_row(args.train_method, args.test, args.holdout, args.seed, outcome)
    write_results_csv(args.out, [row])
    print(f"{args.test} on holdout {args.holdout}: miou={outcome.miou:.4f}, wrote {args.out}")
    return 0


def _bool_key(raw: dict, key: str, default: bool) -> bool:
    if key not in raw:
        return default
    return raw[key].lower() in ("1", "true", "yes", "on")


def _cmd_ablate(args) -> int:
    raw = parse_config_file(args.config)
    if "data" not in raw or "holdout" not in raw:
        print("error: ablate config needs at least data= and holdout=", file=sys.stderr)
        return 2

    def ints(key, default):
        return tuple(int(v) for v in raw[key].split(",")) if key in raw else default

    def strs(key, default):
        return tuple(v.strip() for v in raw[key].split(",")) if key in raw else default

    config = ExperimentConfig(
        data_dir=raw["data"],
        holdout=int(raw["holdout"]),
        train_methods=strs("train_methods", ("agg", "mldg")),
        test_methods=strs("test_methods", ("bn", "tn", "sib")),
        seeds=ints("seeds", (0, 1, 2, 3, 4)),
        epochs=int(raw.get("epochs", 3)),
        batch_size=int(raw.get("batch_size", 8)),
        inner_lr=float(raw.get("inner_lr", 1e-3)),
        outer_lr=float(raw.get("outer_lr", 5e-3)),
        alpha=float(raw.get("alpha", 1.0)),
        split=_split_arg(raw.get("split", "2:2")),
        m=int(raw.get("m", 4)),
        q=int(raw.get("q", 128)),
        style_layer=int(raw.get("style_layer", 1)),
    )
    os.makedirs(args.out, exist_ok=True)

    if "sweep" in raw:
        parameter = raw["sweep"]
        values = [v.strip() for v in raw["sweep_values"].split(",")]
        if parameter in ("m", "q", "style_layer"):
            values = [int(v) for v in values]
        results = sweep(parameter, values, config)
        summary_path = os.path.join(args.out, "summary.csv")
        with open(summary_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["parameter", "value", "method_train", "method_test", "mean_miou", "std_miou"])
            for value, rows in results:
                tag = f"{value[0]}:{value[1]}" if isinstance(value, tuple) else str(value)
                write_results_csv(
                    os.path.join(args.out, f"sweep_{parameter}_{tag.replace(':', '-')}.csv"), rows
                )
                for (tr, te), (mean, std) in sorted(summarize(rows).items()):
                    writer.writerow([parameter, tag, tr, te, repr(mean), repr(std)])
        print(f"swept {parameter} over {len(results)} values, wrote {args.out}")
        return 0

    rows = run_experiment(config)
    write_results_csv(os.path.join(args.out, "results.csv"), rows)
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method_train", "method_test", "mean_miou", "std_miou"])
        for (tr, te), (mean, std) in sorted(summarize(rows).items()):
            writer.writerow([tr, te, repr(mean), repr(std)])
    print(f"grid of {len(rows)} cells, wrote {args.out}")
    return 0


def _cmd_inspect_bank(args) -> int:
    params = load_checkpoint(args.ckpt)
    datasets = load_datasets(args.data)
    _, target = split_datasets(datasets, args.holdout)
    bank = ImageBank(args.q, policy=args.policy)
    n = min(args.limit, len(target)) if args.limit else len(target)
    for i in range(n):
        bank.predict_with_bank(
            target.images[i : i + 1], params, args.m, domain_tag=target.domain_id
        )
    rows = bank.dump_rows()
    with open(args.dump, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["arrival_index", "style_mu", "style_sigma", "domain_tag"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"streamed {n} images, bank holds {len(bank)} entries, wrote {args.dump}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgseg", description="Domain-generalizable segmentation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain benchmark")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--domains", type=int, default=5)
    p.add_argument("--per-domain", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model with a held-out domain")
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int, required=True)
    p.add_argument("--method", choices=("agg", "mldg"), default="mldg")
    p.add_argument("--inner-lr", type=float, default=1e-3)
    p.add_argument("--outer-lr", type=float, default=5e-3)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--split", type=_split_arg, default=(2, 2))
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None, help="optional training-log CSV path")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int, required=True)
    p.add_argument("--test", choices=("bn", "tn", "qib", "sib", "adabn"), default="sib")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--q", type=int, default=128)
    p.add_argument("--style-layer", type=int, default=None)
    p.add_argument("--seed", type=int, default=0, help="label recorded in the results row")
    p.add_argument("--train-method", default="unknown", help="label recorded in the results row")
    p.add_argument("--out", required=True, help="results CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run a grid or sweep from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("inspect-bank", help="stream images through a bank and dump its state")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", type=int, required=True)
    p.add_argument("--policy", choices=("sib", "qib"), default="sib")
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--q", type=int, default=128)
    p.add_argument("--limit", type=int, default=None, help="stream at most this many images")
    p.add_argument("--dump", required=True, help="bank-state CSV path")
    p.set_defaults(func=_cmd_inspect_bank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
