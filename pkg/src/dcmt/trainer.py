"""Adam, the DC-MT training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig, TrainConfig
from .data import BatchSampler, BatchSpec, Sample, Splits, augment_batch, stack_images
from .ema import effective_alpha, ema_update
from .losses import LossBreakdown, LossConfig, total_loss
from .metrics import MetricsReport, build_report, iou
from .model import ModelPair, Params, forward, init_pair, param_shapes, upsample_attention

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "l_c", "l_a", "l_cc", "l_ac", "w_tau", "l_total"]
FORMAT_VERSION = 1

# which terms each method optimizes: (attention loss, classification consistency, attention consistency)
METHOD_TERMS = {
    "supervised": (True, False, False),
    "mean_teacher": (False, True, False),
    "dcmt_nac": (True, True, False),
    "dcmt": (True, True, True),
}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    """Checkpoint manifest and payload disagree, or do not fit the config."""


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()}, {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: Params, grads: dict[str, np.ndarray | None], state: AdamState, config: TrainConfig, t: int) -> None:
    """One bias-corrected Adam update in place; ``t`` counts from 1.

    Weight decay is folded into the gradient as ``g + weight_decay * p``.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else g
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# ----------------------------------------------------------------------------
# training state and checkpoints
# ----------------------------------------------------------------------------


@dataclass
class TrainState:
    pair: ModelPair
    adam: AdamState
    step: int  # index of the next step to run
    total_steps: int
    sampler_state: list[int] = field(default_factory=lambda: [0, 0, 0, 0])
    config_digest: str = ""


def _tensor_blocks(state: TrainState) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for k in state.pair.student:
        blocks.append((f"student/{k}", state.pair.student[k].data))
    for k in state.pair.teacher:
        blocks.append((f"teacher/{k}", state.pair.teacher[k].data))
    for k in state.adam.m:
        blocks.append((f"adam_m/{k}", state.adam.m[k]))
    for k in state.adam.v:
        blocks.append((f"adam_v/{k}", state.adam.v[k]))
    return blocks


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write ``manifest.json`` plus ``payload.bin`` (float64 little-endian) atomically."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in _tensor_blocks(state):
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "encoding": "float64 little-endian, row-major, concatenated in entry order",
        "config_digest": state.config_digest,
        "step": state.step,
        "total_steps": state.total_steps,
        "sampler_state": list(state.sampler_state),
        "payload_values": offset,
        "entries": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    (tmp / "payload.bin").write_bytes(b"".join(chunks))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> TrainState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        payload = (path / "payload.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version")
    n = manifest["payload_values"]
    if len(payload) != 8 * n:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, manifest expects {8 * n}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    groups: dict[str, dict[str, np.ndarray]] = {"student": {}, "teacher": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if count != e["count"] or e["offset"] + count > n:
            raise CheckpointError(f"{path}: entry {e['name']} out of bounds")
        group, name = e["name"].split("/", 1)
        groups[group][name] = flat[e["offset"] : e["offset"] + count].reshape(e["shape"]).copy()
    if config is not None:
        expected = param_shapes(config.model)
        for group in groups.values():
            if {k: tuple(v.shape) for k, v in group.items()} != expected:
                raise CheckpointError(f"{path}: parameter layout does not match the model config")
    student = {k: nx.Tensor(v, requires_grad=True) for k, v in groups["student"].items()}
    teacher = {k: nx.Tensor(v) for k, v in groups["teacher"].items()}
    pair = ModelPair(student, teacher, config.model if config is not None else None)
    pair.check()
    return TrainState(
        pair=pair,
        adam=AdamState(groups["adam_m"], groups["adam_v"]),
        step=int(manifest["step"]),
        total_steps=int(manifest["total_steps"]),
        sampler_state=[int(x) for x in manifest["sampler_state"]],
        config_digest=manifest["config_digest"],
    )


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


def batch_spec_for(config: RunConfig, splits: Splits) -> BatchSpec:
    method = config.trainer_cli.method
    uses_unlabeled = method != "supervised" and bool(splits.unlabeled_train)
    return BatchSpec(config.data.labeled_per_batch, config.data.unlabeled_per_batch if uses_unlabeled else 0)


def planned_steps(config: RunConfig, splits: Splits) -> int:
    """Total optimizer steps.

    One epoch is the number of batches needed to cover the whole training
    set (labeled plus unlabeled) at the configured batch size, so every
    method gets the same step budget for a given split.
    """
    tc = config.trainer_cli
    if tc.steps > 0:
        return tc.steps
    n_train = len(splits.labeled_train) + len(splits.unlabeled_train)
    per_batch = config.data.labeled_per_batch + config.data.unlabeled_per_batch
    return tc.epochs * math.ceil(n_train / per_batch)


def loss_config_for(config: RunConfig, total_steps: int) -> LossConfig:
    lc = config.losses
    tau_max = config.trainer_cli.tau_max or max(total_steps - 1, 1)
    return LossConfig(lc.lambda_a, lc.lambda_r, tau_max, lc.num_classes, lc.eps, lc.attention_on_unlabeled)


def init_state(config: RunConfig, splits: Splits) -> TrainState:
    config.validate()
    pair = init_pair(config.model)
    return TrainState(pair, AdamState.zeros(pair.student), 0, planned_steps(config, splits), config_digest=config.digest())


@dataclass
class TrainResult:
    state: TrainState
    log_rows: list[list]


def _log_row(step: int, b: LossBreakdown) -> list:
    return [step, b.l_c, b.l_a, b.l_cc, b.l_ac, b.w_tau, b.l_total]


def train(
    config: RunConfig,
    splits: Splits,
    state: TrainState | None = None,
    stop_at: int | None = None,
    last_good_dir: str | Path | None = None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Run steps ``state.step`` .. ``stop_at`` (exclusive; default: the end).

    Each step: draw a batch, augment it, forward student and teacher on it,
    form the method's loss, backpropagate, take an Adam step on the student,
    then move the teacher (EMA, or an exact copy for ``supervised``).
    """
    config.validate()
    tc = config.trainer_cli
    if state is None:
        state = init_state(config, splits)
    elif state.config_digest != config.digest():
        raise CheckpointError("checkpoint was written under a different configuration")
    use_att, use_cc, use_ac = METHOD_TERMS[tc.method]
    if tc.method != "supervised" and not splits.unlabeled_train:
        log.warning(
            "unlabeled pool is empty; %s consistency reduces to student-vs-teacher on labeled data", tc.method
        )
    spec = batch_spec_for(config, splits)
    sampler = BatchSampler(
        splits.labeled_train,
        splits.unlabeled_train if spec.unlabeled_per_batch else [],
        spec,
        seed=tc.seed,
        expose_unlabeled_seg=config.losses.attention_on_unlabeled,
    )
    sampler.set_state(state.sampler_state)
    loss_cfg = loss_config_for(config, state.total_steps)
    pair = state.pair
    end = state.total_steps if stop_at is None else min(stop_at, state.total_steps)
    rows: list[list] = []
    noise_rng_seed = [tc.seed & 0xFFFFFFFF, 29]

    for tau in range(state.step, end):
        items = sampler.next_batch()
        if tc.augment:
            items = augment_batch(items, tc.seed, tau)
        x = stack_images(items)
        labels = [it.label for it in items]
        labeled = [it.labeled for it in items]
        segs = [it.seg for it in items]
        try:
            s_out = forward(pair.student, x, config.model)
            if use_cc or use_ac:
                xt = x
                if tc.teacher_input_noise:
                    r = np.random.default_rng(noise_rng_seed + [tau])
                    xt = x + r.normal(0.0, tc.teacher_input_noise, size=x.shape)
                t_out = forward(pair.teacher, xt, config.model)
            else:
                t_out = s_out
            br = total_loss(s_out, t_out, labels, labeled, segs, tau, loss_cfg,
                            use_attention=use_att, use_cc=use_cc, use_ac=use_ac)
            nx.zero_grads(pair.student.values())
            nx.backward(br.total)
        except nx.NonFiniteError as exc:
            if last_good_dir is not None:
                state.sampler_state = sampler.get_state()
                save_checkpoint(state, last_good_dir)
            raise TrainingError(f"non-finite value at step {tau}: {exc}") from exc
        if any(t.grad is not None for t in pair.teacher.values()):
            raise TrainingError("teacher parameters received gradients")
        grads = {k: p.grad for k, p in pair.student.items()}
        adam_step(pair.student, grads, state.adam, tc, tau + 1)
        nx.zero_grads(pair.student.values())
        if tc.method == "supervised":
            ema_update(pair, 0.0)
        else:
            ema_update(pair, effective_alpha(config.ema, tau + 1))
        state.step = tau + 1
        state.sampler_state = sampler.get_state()
        rows.append(_log_row(tau, br))
        if on_step is not None:
            on_step(tau, br)
    return TrainResult(state, rows)


def write_log(path: str | Path, rows: Sequence[list], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "w" if new else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

Predictor = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def model_predictor(params: Params, config: RunConfig, chunk: int = 64) -> Predictor:
    """Wrap a parameter set as ``images[N,1,H,W] -> (probs[N,n], attention[N,H,W])``."""
    size = config.model.input_size

    def predict(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        probs, att = [], []
        for i in range(0, x.shape[0], chunk):
            out = forward(params, x[i : i + chunk], config.model)
            probs.append(out.probs.data)
            att.append(upsample_attention(out.attention, size).data[:, 0])
        return np.concatenate(probs), np.concatenate(att)

    return predict


@dataclass
class Evaluation:
    report: MetricsReport
    per_sample: list[dict]


def evaluate(predict: Predictor, samples: Sequence[Sample], bin_threshold: float = 0.5) -> Evaluation:
    """Score a predictor on labeled test samples (no augmentation)."""
    if not samples:
        raise ValueError("evaluation set is empty")
    x = stack_images(samples)
    probs, att = predict(x)
    labels = [s.label for s in samples]
    segs = np.stack([s.seg for s in samples])
    report = build_report(probs, labels, att, segs, bin_threshold)
    per_sample = [
        {
            "sample_id": s.sample_id,
            "label": s.label,
            "pred": int(np.argmax(p)),
            "iou": iou(a, s.seg, bin_threshold),
        }
        for s, p, a in zip(samples, probs, att)
    ]
    return Evaluation(report, per_sample)


def evaluate_state(state: TrainState, config: RunConfig, samples: Sequence[Sample], which: str | None = None) -> dict[str, Evaluation]:
    which = which or config.trainer_cli.eval_model
    names = ["student", "teacher"] if which == "both" else [which]
    out = {}
    for name in names:
        params = state.pair.student if name == "student" else state.pair.teacher
        out[name] = evaluate(model_predictor(params, config), samples, config.metrics.bin_threshold)
    return out
