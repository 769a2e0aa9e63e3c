"""Command-line pipeline: score -> plan -> train -> adapt-bn / calibrate -> eval -> diagnose.

Each subcommand reads its inputs from files and writes its artifacts under
``out_dir``; every artifact carries the hash of the configuration that
produced it.  Exit status: 0 success, 1 usage or configuration error
(including missing inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .coreset import CoresetPlan, build_plan, storage_filter
from .data import Dataset, FormatError, load_cifar10_bin, load_mnist_idx, normalize, synth_blobs
from .diagnostics import activation_mae, gradient_angle, score_similarity_matrix, write_csv
from .model import FULL_PRECISION, build_model, load_checkpoint, save_checkpoint
from .scoring import DYNAMICS, ScoreMatrix, score_baseline, score_bitwise_dynamics
from .training import (
    MetricsRecord,
    bn_adapt,
    calibrate_baseline,
    evaluate,
    train_batchwise,
)

log = logging.getLogger("mbq")

SUBCOMMANDS = ("score", "plan", "train", "adapt-bn", "calibrate", "eval", "diagnose")

SCORES_FILE = "scores.scores"
PLAN_FILE = "coreset.plan"
CHECKPOINT_FILE = "model.ckpt"
METRICS_FILE = "metrics.jsonl"
EVAL_FILE = "eval.csv"
ANGLES_FILE = "diag_gradient_angles.csv"
MAE_FILE = "diag_activation_mae.csv"
SIMILARITY_FILE = "diag_score_similarity.csv"


class UsageError(Exception):
    """Bad invocation or missing input; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_datasets(cfg: RunConfig) -> tuple:
    """``(train, test)`` normalised with training-split statistics."""
    d = cfg.data
    if d.kind == "mnist":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not Path(getattr(d, key)).is_file():
                raise UsageError(f"data.{key}: file not found: {getattr(d, key)}")
        train = load_mnist_idx(d.train_images, d.train_labels, "train")
        test = load_mnist_idx(d.test_images, d.test_labels, "test")
    elif d.kind == "cifar10":
        for key in ("train_files", "test_files"):
            for path in getattr(d, key):
                if not Path(path).is_file():
                    raise UsageError(f"data.{key}: file not found: {path}")
        train = load_cifar10_bin(d.train_files, "train")
        test = load_cifar10_bin(d.test_files, "test")
    else:
        bl = d.blobs
        both = synth_blobs(bl.n + bl.n_test, bl.d, bl.k, bl.separation, bl.seed)
        train = both.subset(np.arange(bl.n))
        test = both.subset(np.arange(bl.n, bl.n + bl.n_test))
        test.split = "test"
    if d.normalize:
        train = normalize(train)
        test = normalize(test, train.mean, train.std)
    return train, test


def fresh_model(cfg: RunConfig, data: Dataset):
    m = cfg.model
    return build_model(
        cfg.arch(data.sample_shape, data.num_classes),
        cfg.ranges(),
        m.bn_policy,
        cfg.quant_spec(),
        seed=cfg.seed if m.init_seed is None else m.init_seed,
        bias_correction=m.bias_correction,
        per_channel_correction=m.per_channel_correction,
    )


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what}: file not found: {path} (run the producing subcommand first)")
    return path


def _load_model(path: Path, cfg: RunConfig):
    model, meta = load_checkpoint(_require(path, "checkpoint"))
    if meta.get("config_hash") not in (None, cfg.hash()):
        log.warning("checkpoint %s was produced by config %s, current config is %s",
                    path, meta.get("config_hash"), cfg.hash())
    return model, meta


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_score(cfg: RunConfig, out: Path, args) -> None:
    train, _ = load_datasets(cfg)
    sc = cfg.scoring
    model = fresh_model(cfg, train)
    tcfg = cfg.train_config(epochs=sc.epochs)
    if sc.method == DYNAMICS:
        scores = score_bitwise_dynamics(model, train, tcfg, sc.epochs, sc.window, sc.scheme, sc.decay)
    else:
        scores = score_baseline(sc.method, model, train, tcfg, sc.epochs, sc.scheme)
    scores.meta["config_hash"] = cfg.hash()
    path = Path(args.output or out / SCORES_FILE)
    scores.save(path)
    log.info("wrote %s (%d samples, bits %s)", path, scores.n, scores.bits)


def cmd_plan(cfg: RunConfig, out: Path, args) -> None:
    scores = ScoreMatrix.load(_require(Path(args.scores or out / SCORES_FILE), "scores"))
    c = cfg.coreset
    survivors = storage_filter(scores, c.keep_fraction) if c.keep_fraction < 1 else None
    plan = build_plan(
        scores, c.pruning_rate, c.temperature, epochs=cfg.train.epochs, seed=cfg.seed,
        floor=c.floor, survivors=survivors, config_hash=cfg.hash(),
    )
    path = Path(args.output or out / PLAN_FILE)
    plan.save(path)
    log.info("wrote %s (%d samples per bit per epoch)", path, len(plan.indices(plan.bits[0], 1)))


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    train, test = load_datasets(cfg)
    plan = None
    plan_path = Path(args.plan) if args.plan else out / PLAN_FILE
    if not args.full and cfg.train.use_plan:
        if args.plan:
            _require(plan_path, "plan")
        if plan_path.is_file():
            plan = CoresetPlan.load(plan_path)
            if plan.n != len(train):
                raise UsageError(f"plan {plan_path} covers {plan.n} samples, training split has {len(train)}")
    model = fresh_model(cfg, train)
    model, records = train_batchwise(model, train, cfg.train_config(), plan=plan)
    final = records[-1].epoch if records else 0
    for b in model.ranges.trained:
        acc, loss = evaluate(model, test, b)
        records.append(MetricsRecord(final, b, "test", loss, acc, records[-1].wall_seconds, len(test)))
    ckpt = Path(args.output or out / CHECKPOINT_FILE)
    meta = {"config_hash": cfg.hash(), "stage": "train", "coreset": plan is not None}
    save_checkpoint(model, ckpt, meta)
    h = cfg.hash()
    with open(out / METRICS_FILE, "w") as f:
        for r in records:
            f.write(json.dumps({"config_hash": h, **json.loads(r.to_json())}) + "\n")
    log.info("wrote %s and %s", ckpt, out / METRICS_FILE)


def cmd_adapt_bn(cfg: RunConfig, out: Path, args) -> None:
    ckpt = Path(args.checkpoint or out / CHECKPOINT_FILE)
    model, meta = _load_model(ckpt, cfg)
    train, _ = load_datasets(cfg)
    if cfg.adapt.samples is not None:
        train = train.subset(np.arange(min(cfg.adapt.samples, len(train))))
    bn_adapt(model, train, model.ranges.switchable, cfg.adapt.passes, cfg.adapt.batch_size)
    meta.update(config_hash=cfg.hash(), bn_adapted=True)
    dest = Path(args.output or ckpt)
    save_checkpoint(model, dest, meta)
    log.info("wrote %s (BN statistics adapted for bits %s)", dest, list(model.ranges.switchable))


def cmd_calibrate(cfg: RunConfig, out: Path, args) -> None:
    ckpt = Path(args.checkpoint or out / CHECKPOINT_FILE)
    model, meta = _load_model(ckpt, cfg)
    untrained = sorted(set(model.ranges.switchable) - set(model.ranges.trained))
    if not untrained:
        raise UsageError("bits.switchable: no calibrated bit-widths to calibrate")
    train, _ = load_datasets(cfg)
    try:
        calibrate_baseline(model, train, untrained, cfg.train_config())
    except ValueError as exc:
        raise UsageError(f"model.bn_policy: {exc}") from None
    meta.update(config_hash=cfg.hash(), calibrated=untrained)
    dest = Path(args.output or ckpt)
    save_checkpoint(model, dest, meta)
    log.info("wrote %s (calibrated bits %s)", dest, untrained)


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    model, _ = _load_model(Path(args.checkpoint or out / CHECKPOINT_FILE), cfg)
    _, test = load_datasets(cfg)
    rows = []
    for b in model.ranges.switchable:
        acc, loss = evaluate(model, test, b)
        rows.append({
            "bit": b, "trained": int(b in model.ranges.trained),
            "accuracy": f"{acc:.6f}", "loss": f"{loss:.6f}", "config_hash": cfg.hash(),
        })
        print(f"b={b:>2}  acc={acc:.4f}  loss={loss:.4f}")
    path = Path(args.output or out / EVAL_FILE)
    write_csv(path, rows)
    log.info("wrote %s", path)


def cmd_diagnose(cfg: RunConfig, out: Path, args) -> None:
    model, _ = _load_model(Path(args.checkpoint or out / CHECKPOINT_FILE), cfg)
    train, _ = load_datasets(cfg)
    dg = cfg.diagnose
    h = cfg.hash()
    rng = np.random.default_rng([cfg.seed, 31337])
    b1, b2 = dg.pair
    rows = []
    for i in range(dg.batches):
        idx = np.sort(rng.choice(len(train), size=min(dg.batch_size, len(train)), replace=False))
        rep = gradient_angle(model, (train.images[idx], train.labels[idx]), b1, b2)
        rows += [{"batch": i, "b1": b1, "b2": b2, **r, "config_hash": h} for r in rep.rows()]
    write_csv(out / ANGLES_FILE, rows, ["batch", "b1", "b2", "layer", "angle_deg", "config_hash"])

    written = [out / ANGLES_FILE]

    if FULL_PRECISION in model.ranges.switchable:
        probe = train.images[: min(len(train), 500)]
        mae = [
            {"bit": b, "site": site, "mae": f"{activation_mae(model, probe, b, site):.8g}", "config_hash": h}
            for b in model.ranges.switchable
            for site in model.bn_sites()
        ]
        write_csv(out / MAE_FILE, mae, ["bit", "site", "mae", "config_hash"])
        written.append(out / MAE_FILE)
    else:
        log.warning("activation MAE skipped: the full-precision reference (b=32) is not switchable")

    scores_path = Path(args.scores or out / SCORES_FILE)
    if scores_path.is_file():
        scores = ScoreMatrix.load(scores_path)
        if len(scores.bits) >= 2:
            sim = score_similarity_matrix(scores)
            rows = [
                {"bit_a": a, "bit_b": scores.bits[j], "spearman": "" if np.isnan(sim[i, j]) else f"{sim[i, j]:.8f}",
                 "config_hash": h}
                for i, a in enumerate(scores.bits)
                for j in range(len(scores.bits))
            ]
            write_csv(out / SIMILARITY_FILE, rows, ["bit_a", "bit_b", "spearman", "config_hash"])
            written.append(out / SIMILARITY_FILE)
    log.info("wrote %s", ", ".join(str(p) for p in written))


HANDLERS = {
    "score": cmd_score,
    "plan": cmd_plan,
    "train": cmd_train,
    "adapt-bn": cmd_adapt_bn,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.lr=0.1 (repeatable)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out-dir", help="override out_dir")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="mbq", description="Multi-bit quantization training with per-bit coresets.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "score": "train briefly and write per-bit importance scores",
        "plan": "sample per-bit, per-epoch coresets from a score file",
        "train": "batch-wise multi-bit training (on the plan if present)",
        "adapt-bn": "recompute BN statistics for every switchable bit",
        "calibrate": "baseline BN calibration for untrained bits (per_bit policy)",
        "eval": "test accuracy for every switchable bit",
        "diagnose": "gradient angles, activation MAE and score similarity CSVs",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        p.add_argument("--output", "-o", help="output path (default under out_dir)")
        if name in ("plan", "diagnose"):
            p.add_argument("--scores", help="score file (default out_dir/" + SCORES_FILE + ")")
        if name == "train":
            p.add_argument("--plan", help="coreset plan (default out_dir/" + PLAN_FILE + " if it exists)")
            p.add_argument("--full", action="store_true", help="ignore any plan and train on all data")
        if name in ("adapt-bn", "calibrate", "eval", "diagnose"):
            p.add_argument("--checkpoint", help="checkpoint (default out_dir/" + CHECKPOINT_FILE + ")")
    return parser


def run(
    subcommand: str,
    config_path=None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out_dir=None,
    **paths,
) -> int:
    """Programmatic entry point mirroring the command line."""
    argv = [subcommand]
    if config_path is not None:
        argv += ["--config", str(config_path)]
    for item in overrides:
        argv += ["--set", item]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if out_dir is not None:
        argv += ["--out-dir", str(out_dir)]
    for key, value in paths.items():
        if isinstance(value, bool):
            if value:
                argv.append("--" + key.replace("_", "-"))
        elif value is not None:
            argv += ["--" + key.replace("_", "-"), str(value)]
    return main(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mbq: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.out_dir:
            overrides.append(f"out_dir={json.dumps(args.out_dir)}")
        cfg = load_config(args.config, overrides, args.seed)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"mbq: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"mbq: error: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"mbq: malformed input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"mbq: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
