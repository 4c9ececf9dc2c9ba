"""Command-line interface: ``synth``, ``train``, ``eval`` and ``sweep``.

Every run writes a resolved ``config.json`` next to its outputs; feeding it
back through ``--config`` replays the run exactly. Flags given on the
command line override values from a config file.
"""

import argparse
import copy
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .dataset import PRESETS, SynthConfig, generate_synthetic, load_dataset, preset, split_by_item, write_dataset
from .embedding import EmbeddingModel, load_checkpoint, save_checkpoint
from .errors import ConfigError, TripletSearchError
from .evaluation import (
    DEFAULT_K_LIST,
    EvalProtocol,
    default_protocol,
    evaluate,
    write_confusion_csv,
    write_recall_csv,
    write_report_json,
)
from .train import TrainConfig, train

log = logging.getLogger("tripletsearch")

# flag dest -> location inside the run config
TRAIN_FLAGS = {
    "margin": ("train", "margin"),
    "batch_pairs": ("train", "sampler", "batch_pairs"),
    "within_class_frac": ("train", "sampler", "within_class_fraction"),
    "negatives_from_anchors": ("train", "sampler", "negatives_from_anchors"),
    "negative_strategy": ("train", "sampler", "negative_strategy"),
    "pair_mode": ("train", "pair_mode"),
    "steps": ("train", "steps"),
    "lr": ("train", "optimizer", "lr"),
    "momentum": ("train", "optimizer", "momentum"),
    "arch": ("train", "arch"),
    "hidden_dim": ("train", "hidden_dim"),
    "output_dim": ("train", "output_dim"),
    "eval_every": ("train", "eval_every"),
    "seed": ("train", "seed"),
    "protocol": ("protocol",),
    "k_list": ("k_list",),
    "test_fraction": ("test_fraction",),
    "split_seed": ("split_seed",),
    "eval_data": ("eval_data",),
}


def default_run_config():
    return {
        "data": None,
        "eval_data": None,
        "test_fraction": 0.0,
        "split_seed": 0,
        "protocol": None,
        "k_list": list(DEFAULT_K_LIST),
        "train": TrainConfig().to_dict(),
    }


def _deep_update(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _set_path(doc, path, value):
    for key in path[:-1]:
        doc = doc.setdefault(key, {})
    doc[path[-1]] = value


def _get_path(doc, path):
    for key in path:
        if not isinstance(doc, dict) or key not in doc:
            return None
        doc = doc[key]
    return doc


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def resolve_run_config(args):
    """Merge defaults, an optional config file and explicit flags."""
    cfg = default_run_config()
    from_file = _read_json(args.config) if getattr(args, "config", None) else {}
    if not isinstance(from_file, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    _deep_update(cfg, copy.deepcopy(from_file))

    for dest, path in TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_path(cfg, path, value)
    if args.data is not None:
        cfg["data"] = {"path": args.data}
    elif args.preset is not None:
        cfg["data"] = {"preset": args.preset, "seed": args.data_seed}

    if args.seed is None and _get_path(from_file, ("train", "seed")) is None:
        raise ConfigError("--seed is required (or set train.seed in the config file)")
    if cfg["data"] is None:
        raise ConfigError("no training data: pass --data PATH or --preset NAME")
    cfg["k_list"] = sorted({int(k) for k in cfg["k_list"]})
    # normalize the synthetic description so the stored config is self-contained
    data = cfg["data"]
    if "preset" in data and "synth" not in data:
        data["synth"] = preset(data["preset"], seed=int(data.get("seed", 0))).to_dict()
    return cfg


def _load_data_source(source):
    if "path" in source:
        return load_dataset(source["path"])
    if "synth" in source:
        return generate_synthetic(SynthConfig(**source["synth"]))
    raise ConfigError(f"data source needs 'path' or 'synth', got keys {sorted(source)}")


def prepare_datasets(cfg):
    """Return ``(train_ds, eval_ds)`` for a resolved run config."""
    ds = _load_data_source(cfg["data"])
    frac = float(cfg["test_fraction"])
    if cfg["eval_data"]:
        if frac:
            raise ConfigError("use either --eval-data or --test-fraction, not both")
        return ds, load_dataset(cfg["eval_data"])
    if frac:
        return split_by_item(ds, frac, seed=int(cfg["split_seed"]))
    return ds, ds


def run_training(cfg, out_dir):
    """Train and evaluate one resolved run config, writing all artifacts.

    Returns ``(final_report, step_metrics)``.
    """
    train_cfg = TrainConfig.from_dict(cfg["train"]).validate()
    cfg["train"] = train_cfg.to_dict()
    train_ds, eval_ds = prepare_datasets(cfg)
    protocol = EvalProtocol(cfg["protocol"]) if cfg["protocol"] else default_protocol(eval_ds)
    cfg["protocol"] = protocol.value

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")

    step_metrics = []
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:

        def on_record(entry):
            fh.write(json.dumps(entry) + "\n")
            if "eval" not in entry:
                step_metrics.append(entry)
            else:
                log.info("step %d recall@1 %.4f", entry["step"], entry["eval"]["recall_at_k"][str(cfg["k_list"][0])])

        model, records = train(train_ds, train_cfg, eval_ds=eval_ds, protocol=protocol, k_list=cfg["k_list"], on_record=on_record)

    metadata = {"margin": train_cfg.margin, "train_config": train_cfg.to_dict(), "data": cfg["data"]}
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.json"), metadata=metadata)
    final = evaluate(model, eval_ds, protocol, cfg["k_list"])
    _write_report_files(final, out_dir)
    return final, step_metrics


def _write_report_files(report, out_dir):
    write_report_json(report, os.path.join(out_dir, "report.json"))
    write_recall_csv(report, os.path.join(out_dir, "recall.csv"))
    write_confusion_csv(report, os.path.join(out_dir, "confusion.csv"))


def _summary(report):
    recalls = " ".join(f"R@{k}={v:.4f}" for k, v in sorted(report.recall_at_k.items()))
    return (
        f"{report.protocol}: {report.n_queries} queries, {recalls}, "
        f"first-retrieval class accuracy {report.overall_first_retrieval_accuracy:.4f}"
    )


# -- commands ------------------------------------------------------------------


SYNTH_FIELDS = (
    "n_classes", "items_per_class", "images_per_item", "dim", "class_spread",
    "item_spread", "image_noise", "nuisance_dims", "nuisance_spread",
)


def cmd_synth(args):
    cfg = PRESETS[args.preset] if args.preset else SynthConfig()
    overrides = {name: getattr(args, name) for name in SYNTH_FIELDS if getattr(args, name) is not None}
    if args.two_domain:
        overrides["two_domain"] = True
    cfg = replace(cfg, seed=args.seed, **overrides).validate(for_training=True)
    ds = generate_synthetic(cfg)
    parent = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(parent, exist_ok=True)
    write_dataset(ds, args.output)
    print(
        f"wrote {len(ds)} records ({len(ds.index_by_item)} items, {len(ds.classes)} classes, "
        f"dim {ds.input_dim}) to {args.output}"
    )
    return 0


def cmd_train(args):
    cfg = resolve_run_config(args)
    report, _ = run_training(cfg, args.out_dir)
    print(f"step {cfg['train']['steps']} {_summary(report)}")
    return 0


def cmd_eval(args):
    if args.data is not None:
        source = {"path": args.data}
    elif args.preset is not None:
        source = {"preset": args.preset, "seed": args.data_seed,
                  "synth": preset(args.preset, seed=args.data_seed).to_dict()}
    else:
        raise ConfigError("no evaluation data: pass --data PATH or --preset NAME")
    ds = _load_data_source(source)
    if args.identity:
        model = EmbeddingModel.identity(ds.input_dim)
    else:
        model, _ = load_checkpoint(args.checkpoint)
    protocol = EvalProtocol(args.protocol) if args.protocol else default_protocol(ds)
    k_list = sorted(set(args.k_list or DEFAULT_K_LIST))
    report = evaluate(model, ds, protocol, k_list)

    os.makedirs(args.out_dir, exist_ok=True)
    resolved = {
        "model": "identity" if args.identity else {"checkpoint": args.checkpoint},
        "data": source,
        "protocol": protocol.value,
        "k_list": k_list,
    }
    with open(os.path.join(args.out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2)
        fh.write("\n")
    _write_report_files(report, args.out_dir)
    print(_summary(report))
    return 0


SWEEP_PATHS = {
    "batch-size": (("train", "sampler", "batch_pairs"), int),
    "within-class": (("train", "sampler", "within_class_fraction"), float),
}


def sweep_point(task):
    """Run one sweep point; top-level so worker processes can pickle it."""
    cfg, out_dir, nonzero_start = task
    report, metrics = run_training(cfg, out_dir)
    window = [m["nonzero_fraction"] for m in metrics if m["step"] >= nonzero_start]
    mean_nz = float(np.mean(window)) if window else float("nan")
    return report.recall_at_k.get(1), mean_nz


def cmd_sweep(args):
    base = resolve_run_config(args)
    path, cast = SWEEP_PATHS[args.kind]
    if 1 not in base["k_list"]:
        base["k_list"] = sorted(base["k_list"] + [1])
    base_seed = int(base["train"]["seed"])
    tasks = []
    for i, raw in enumerate(args.values):
        value = cast(raw)
        cfg = copy.deepcopy(base)
        _set_path(cfg, path, value)
        cfg["train"]["seed"] = base_seed + i
        run_dir = os.path.join(args.out_dir, f"run{i:02d}_{args.kind}_{value}")
        tasks.append((cfg, run_dir, args.nonzero_start))
    # validate every point up front so a bad value fails before any training
    for cfg, _, _ in tasks:
        TrainConfig.from_dict(cfg["train"]).validate()

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(sweep_point, tasks))
    else:
        results = [sweep_point(t) for t in tasks]

    os.makedirs(args.out_dir, exist_ok=True)
    sweep_csv = os.path.join(args.out_dir, "sweep.csv")
    with open(sweep_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["value", "recall_at_1", "mean_nonzero_fraction"])
        for (cfg, _, _), (r1, nz) in zip(tasks, results):
            writer.writerow([repr(_get_path(cfg, path)), repr(r1), repr(nz)])
            print(f"{args.kind}={_get_path(cfg, path)} recall@1={r1:.4f} mean_nonzero_fraction={nz:.4f}")
    print(f"wrote {sweep_csv}")
    return 0


# -- argument parsing ----------------------------------------------------------


def _k_list(text):
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _add_data_args(p):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset CSV file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="generate a synthetic preset instead")
    p.add_argument("--data-seed", type=int, default=0, help="seed for --preset generation (default 0)")


def _add_run_args(p):
    p.add_argument("--config", help="JSON run config; explicit flags override it")
    _add_data_args(p)
    p.add_argument("--out-dir", required=True, help="directory for every output of the run")
    p.add_argument("--seed", type=int, help="training seed (required unless set in --config)")
    p.add_argument("--margin", type=float, help="triplet margin (default 0.1)")
    p.add_argument("--batch-pairs", type=int, help="anchor-positive pairs per minibatch (default 48)")
    p.add_argument("--within-class-frac", type=float, help="probability of a single-class batch (default 0.0)")
    p.add_argument("--pair-mode", choices=["all", "cross"], help="positive pairing rule (default all)")
    p.add_argument("--negatives-from-anchors", action="store_true", default=None,
                   help="also consider other anchors as negatives")
    p.add_argument("--negative-strategy", choices=["batch-hard", "random"], help="default batch-hard")
    p.add_argument("--steps", type=int, help="optimization steps (default 2000)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    p.add_argument("--momentum", type=float, help="momentum coefficient (default 0.9)")
    p.add_argument("--arch", choices=["linear", "mlp1"], help="embedding architecture (default linear)")
    p.add_argument("--hidden-dim", type=int, help="hidden width for mlp1")
    p.add_argument("--output-dim", type=int, help="embedding width (default: input width)")
    p.add_argument("--eval-every", type=int, help="steps between logged evaluations (default 500)")
    p.add_argument("--protocol", choices=[e.value for e in EvalProtocol],
                   help="default: cross-domain when the data has both domains, else single-pool")
    p.add_argument("--k-list", type=_k_list, help="comma-separated recall cutoffs (default 1,5,10,20,30,40,50)")
    p.add_argument("--test-fraction", type=float, help="hold out this fraction of items for evaluation (default 0)")
    p.add_argument("--split-seed", type=int, help="seed for the held-out split (default 0)")
    p.add_argument("--eval-data", help="separate dataset CSV for evaluation")


def build_parser():
    parser = argparse.ArgumentParser(prog="tripletsearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    for name in SYNTH_FIELDS:
        kind = float if "spread" in name or name == "image_noise" else int
        p.add_argument("--" + name.replace("_", "-"), type=kind)
    p.add_argument("--two-domain", action="store_true", help="split images into query and catalog domains")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an embedding and evaluate it")
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or raw features) on a dataset")
    model = p.add_mutually_exclusive_group(required=True)
    model.add_argument("--checkpoint")
    model.add_argument("--identity", action="store_true", help="use the raw features as embeddings")
    _add_data_args(p)
    p.add_argument("--protocol", choices=[e.value for e in EvalProtocol])
    p.add_argument("--k-list", type=_k_list)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one train+eval run per value of a swept setting")
    _add_run_args(p)
    p.add_argument("--kind", choices=sorted(SWEEP_PATHS), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--nonzero-start", type=int, default=1,
                   help="first step included in mean_nonzero_fraction (default 1)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TripletSearchError, OSError, ValueError, TypeError) as exc:
        # TypeError covers unknown keys in a config file's nested objects
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
