"""Ablation grids: attention-loss weights, semi-supervision benefit, method ordering.

Each table is a list of variants run over several seeds on one fixed
synthetic dataset. Runs shared between tables are computed once per
:class:`AblationRunner`.
"""

from __future__ import annotations

import dataclasses
import logging
import statistics
from dataclasses import dataclass
from typing import Callable, Sequence

from .config import RunConfig
from .data import Sample, SplitSpec, Splits, generate_dataset, make_splits
from .metrics import MetricsReport
from .trainer import evaluate_state, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    method: str
    labeled_fraction: float
    lambda_a: float = 0.5
    lambda_r: float = 0.001


FS10 = Variant("fs10", "supervised", 0.1)
FS100 = Variant("fs100", "supervised", 1.0)
DCMT10 = Variant("dcmt10", "dcmt", 0.1)
MT10 = Variant("mt10", "mean_teacher", 0.1)
NAC10 = Variant("nac10", "dcmt_nac", 0.1)
ATT_00 = Variant("dcmt10_la0_lr0", "dcmt", 0.1, 0.0, 0.0)
ATT_R0 = Variant("dcmt10_la0.5_lr0", "dcmt", 0.1, 0.5, 0.0)

TABLES: dict[int, tuple[Variant, ...]] = {
    1: (ATT_00, ATT_R0, DCMT10),
    2: (FS10, DCMT10, FS100),
    3: (MT10, NAC10, DCMT10),
}
TABLE_METRIC = {1: "tiou", 2: "f1", 3: "f1"}


@dataclass
class RunRecord:
    variant: Variant
    seed: int
    report: MetricsReport

    @property
    def run_id(self) -> str:
        return f"{self.variant.name}_s{self.seed}"

    def row(self) -> dict:
        r = self.report
        return {
            "run_id": self.run_id,
            "labeled_fraction": self.variant.labeled_fraction,
            "method": self.variant.method,
            "recall": r.recall,
            "f1": r.f1,
            "auc": r.auc,
            "tiou": r.tiou,
        }


def variant_config(base: RunConfig, v: Variant, seed: int) -> RunConfig:
    cfg = dataclasses.replace(
        base,
        data=dataclasses.replace(base.data, labeled_fraction=v.labeled_fraction),
        losses=dataclasses.replace(base.losses, lambda_a=v.lambda_a, lambda_r=v.lambda_r),
        trainer_cli=dataclasses.replace(base.trainer_cli, method=v.method),
    )
    return cfg.with_seed(seed)


class AblationRunner:
    """Runs variants on one dataset and memoizes (variant, seed) results."""

    def __init__(self, base: RunConfig, on_done: Callable[[RunRecord], None] | None = None):
        base.validate()
        self.base = base
        self.samples: list[Sample] = generate_dataset(base.data)
        self._splits: dict[float, Splits] = {}
        self._done: dict[tuple[Variant, int], RunRecord] = {}
        self.on_done = on_done

    def splits(self, fraction: float) -> Splits:
        if fraction not in self._splits:
            d = self.base.data
            self._splits[fraction] = make_splits(self.samples, SplitSpec(d.train_fraction, fraction, d.seed))
        return self._splits[fraction]

    def run(self, v: Variant, seed: int) -> RunRecord:
        key = (v, seed)
        if key not in self._done:
            cfg = variant_config(self.base, v, seed)
            splits = self.splits(v.labeled_fraction)
            result = train(cfg, splits)
            ev = evaluate_state(result.state, cfg, splits.test)[cfg.trainer_cli.eval_model]
            rec = RunRecord(v, seed, ev.report)
            log.info("%s f1=%.4f tiou=%.4f", rec.run_id, rec.report.f1, rec.report.tiou)
            self._done[key] = rec
            if self.on_done is not None:
                self.on_done(rec)
        return self._done[key]

    def table(self, table: int, seeds: Sequence[int]) -> list[RunRecord]:
        return [self.run(v, s) for v in TABLES[table] for s in seeds]


def metric_by_seed(records: Sequence[RunRecord], metric: str) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    for r in records:
        out.setdefault(r.variant.name, {})[r.seed] = getattr(r.report, metric)
    return out


def medians(records: Sequence[RunRecord], metric: str) -> dict[str, float]:
    return {k: statistics.median(v.values()) for k, v in metric_by_seed(records, metric).items()}


@dataclass
class Check:
    description: str
    passed: bool


def check_table(table: int, records: Sequence[RunRecord]) -> list[Check]:
    """The directional claims each table is expected to reproduce."""
    metric = TABLE_METRIC[table]
    med = medians(records, metric)
    if table == 1:
        hi, mid, lo = med[DCMT10.name], med[ATT_R0.name], med[ATT_00.name]
        return [
            Check(f"TIoU(0.5,0.001)={hi:.4f} >= TIoU(0.5,0)={mid:.4f}", hi >= mid),
            Check(f"TIoU(0.5,0)={mid:.4f} >= TIoU(0,0)={lo:.4f}", mid >= lo),
            Check(f"TIoU(0.5,0.001)-TIoU(0,0)={hi - lo:.4f} >= 0.2", hi - lo >= 0.2),
        ]
    if table == 2:
        fs10, dc, fs100 = med[FS10.name], med[DCMT10.name], med[FS100.name]
        by_seed = metric_by_seed(records, metric)
        seeds = sorted(by_seed[FS10.name])
        wins = sum(by_seed[DCMT10.name][s] > by_seed[FS10.name][s] for s in seeds)
        return [
            Check(f"F1 FS10={fs10:.4f} < DCMT10={dc:.4f}", fs10 < dc),
            Check(f"F1 DCMT10={dc:.4f} <= FS100={fs100:.4f}", dc <= fs100),
            Check(f"DCMT10 beats FS10 in {wins}/{len(seeds)} seeds (need >= {len(seeds) - 1})", wins >= len(seeds) - 1),
        ]
    mt, nac, dc = med[MT10.name], med[NAC10.name], med[DCMT10.name]
    return [
        Check(f"F1 MT={mt:.4f} <= NAC={nac:.4f}", mt <= nac),
        Check(f"F1 NAC={nac:.4f} <= DCMT={dc:.4f}", nac <= dc),
        Check(f"F1 MT={mt:.4f} < DCMT={dc:.4f}", mt < dc),
    ]
