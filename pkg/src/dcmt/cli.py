"""Command-line entry point.

Every artifact lands under ``--out-dir``::

    dcmt --out-dir runs/a gen-data            # runs/a/data/
    dcmt --out-dir runs/a train               # runs/a/checkpoint/, runs/a/log.csv
    dcmt --out-dir runs/a eval                # runs/a/eval.csv, runs/a/eval_thresholds.csv
    dcmt --out-dir runs/a ablate --table 1    # runs/a/table1.csv

``--seed`` sets the dataset seed for ``gen-data`` and the run seed
(initialization, batch order, augmentation) everywhere else.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ablation, audit
from .config import EVAL_MODELS, RunConfig, load_config
from .data import DataError, FormatError, SplitSpec, Splits, generate_dataset, make_splits, read_dataset, write_dataset, write_pgm
from .metrics import UsageError, write_leaderboard, write_threshold_csv
from .model import ConfigError
from .trainer import (
    CheckpointError,
    TrainingError,
    evaluate_state,
    load_checkpoint,
    model_predictor,
    save_checkpoint,
    train,
    write_log,
)

log = logging.getLogger("dcmt")

EXPECTED_ERRORS = (ConfigError, CheckpointError, DataError, FormatError, TrainingError, UsageError, FileNotFoundError)


def _run_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None and args.command != "gen-data":
        cfg = cfg.with_seed(args.seed)
    return cfg


def _splits(args: argparse.Namespace, cfg: RunConfig) -> Splits:
    if getattr(args, "data", None):
        _, splits = read_dataset(args.data)
        return splits
    d = cfg.data
    return make_splits(generate_dataset(d), SplitSpec(d.train_fraction, d.labeled_fraction, d.seed))


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    d = cfg.data
    samples = generate_dataset(d)
    splits = make_splits(samples, SplitSpec(d.train_fraction, d.labeled_fraction, d.seed))
    out = write_dataset(Path(args.out_dir) / "data", samples, splits)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    splits = _splits(args, cfg)
    out = Path(args.out_dir)
    ckpt = out / "checkpoint"
    state = None
    if args.resume:
        state = load_checkpoint(ckpt, cfg)
        log.info("resuming at step %d of %d", state.step, state.total_steps)
    result = train(cfg, splits, state=state, stop_at=args.stop_at, last_good_dir=out / "last_good")
    save_checkpoint(result.state, ckpt)
    write_log(out / "log.csv", result.log_rows, append=args.resume)
    print(f"step {result.state.step}/{result.state.total_steps}; checkpoint at {ckpt}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    splits = _splits(args, cfg)
    out = Path(args.out_dir)
    state = load_checkpoint(args.checkpoint or out / "checkpoint", cfg)
    results = evaluate_state(state, cfg, splits.test, args.model)
    rows, reports = [], []
    for name, ev in results.items():
        r = ev.report
        run_id = f"{cfg.trainer_cli.method}_{name}_s{cfg.trainer_cli.seed}"
        rows.append(dict(run_id=run_id, labeled_fraction=cfg.data.labeled_fraction, method=cfg.trainer_cli.method,
                         recall=r.recall, f1=r.f1, auc=r.auc, tiou=r.tiou))
        reports.append((run_id, r))
        with open(out / f"per_sample_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["sample_id", "label", "pred", "iou"], lineterminator="\n")
            w.writeheader()
            w.writerows(ev.per_sample)
        print(f"{name}: recall={r.recall:.4f} f1={r.f1:.4f} auc={r.auc:.4f} tiou={r.tiou:.4f}")
    write_leaderboard(out / "eval.csv", rows)
    write_threshold_csv(out / "eval_thresholds.csv", reports)
    return 0


def cmd_export_attention(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    splits = _splits(args, cfg)
    out = Path(args.out_dir)
    state = load_checkpoint(args.checkpoint or out / "checkpoint", cfg)
    params = state.pair.teacher if args.model == "teacher" else state.pair.student
    samples = splits.test[: args.limit] if args.limit else splits.test
    x = np.stack([s.image for s in samples])[:, None]
    _, att = model_predictor(params, cfg)(x)
    target = out / "attention"
    target.mkdir(parents=True, exist_ok=True)
    for s, a in zip(samples, att):
        write_pgm(s.image, target / f"{s.sample_id}_image.pgm")
        write_pgm(s.seg, target / f"{s.sample_id}_seg.pgm")
        write_pgm(a, target / f"{s.sample_id}_attention.pgm")
    print(f"wrote {len(samples)} attention maps to {target}")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    ok = True
    for name, rep in audit.audit_primitives(tol=args.tol).items():
        ok &= bool(rep.passed)
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:18s} max_rel_error={rep.max_rel_error:.3e}")
    rep = audit.audit_student_loss(seed=args.seed or 0, tol=args.tol)
    ok &= bool(rep.passed)
    print(f"{'PASS' if rep.passed else 'FAIL'} {'student loss':18s} max_rel_error={rep.max_rel_error:.3e} over {rep.checked} entries")
    return 0 if ok else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    base = load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = args.seed or 0
    runner = ablation.AblationRunner(base)
    records = runner.table(args.table, range(first, first + args.seeds))
    write_leaderboard(out / f"table{args.table}.csv", [r.row() for r in records])
    write_threshold_csv(out / f"table{args.table}_thresholds.csv", [(r.run_id, r.report) for r in records])
    metric = ablation.TABLE_METRIC[args.table]
    for name, value in ablation.medians(records, metric).items():
        print(f"median {metric} {name}: {value:.4f}")
    for check in ablation.check_table(args.table, records):
        print(f"{'PASS' if check.passed else 'FAIL'} {check.description}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcmt", description="Dual-consistency mean teacher on synthetic band images.")
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--seed", type=int, help="dataset seed for gen-data, run seed otherwise")
    p.add_argument("--out-dir", default="runs", help="directory for every artifact (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("gen-data", help="write the synthetic dataset as PGM files plus manifest.csv")

    def data_flag(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--data", help="dataset directory from gen-data (default: regenerate from config)")

    sp = sub.add_parser("train", help="train and write checkpoint/ and log.csv")
    data_flag(sp)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint, appending to log.csv")
    sp.add_argument("--stop-at", type=int, help="stop before this step index")

    for name, helptext in (("eval", "score a checkpoint on the test split"),
                           ("export-attention", "write image, seg and attention PGMs for test samples")):
        sp = sub.add_parser(name, help=helptext)
        data_flag(sp)
        sp.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoint)")
        if name == "eval":
            sp.add_argument("--model", choices=EVAL_MODELS, default=None, help="default: trainer_cli.eval_model")
        else:
            sp.add_argument("--model", choices=("student", "teacher"), default="teacher")
            sp.add_argument("--limit", type=int, default=0, help="export at most this many samples")

    sp = sub.add_parser("grad-check", help="finite-difference audit of every primitive and the full loss")
    sp.add_argument("--tol", type=float, default=1e-4)

    sp = sub.add_parser("ablate", help="run an ablation grid over seeds and write its leaderboard")
    sp.add_argument("--table", type=int, choices=sorted(ablation.TABLES), required=True,
                    help="1: attention-loss weights, 2: labeled-data benefit, 3: method ordering")
    sp.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-attention": cmd_export_attention,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        print(f"dcmt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
