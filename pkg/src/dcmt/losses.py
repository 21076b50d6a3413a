"""Loss terms of the DC-MT objective and the consistency ramp-up.

Every loss returns a scalar :class:`~dcmt.numerics.Tensor` so the student
terms can be differentiated. Teacher outputs are detached before use.
Ratios carry ``eps`` in the denominator; with two empty masks the ratio is
therefore 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import ConfigError, ForwardOutput, upsample_attention
from .numerics import DimensionError, Tensor


class DataError(ValueError):
    """Labels or masks violate their contract."""


class ActivationError(ValueError):
    """An attention map left the [0, 1] range."""


@dataclass
class LossConfig:
    lambda_a: float = 0.5
    lambda_r: float = 0.001
    tau_max: int = 1
    num_classes: int = 3
    eps: float = 1e-8
    attention_on_unlabeled: bool = False

    def validate(self) -> None:
        if self.lambda_a < 0 or self.lambda_r < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.tau_max <= 0:
            raise ConfigError("tau_max must be positive")


@dataclass
class LossBreakdown:
    l_c: float
    l_a: float
    l_cc: float
    l_ac: float
    w_tau: float
    l_total: float
    total: Tensor = field(repr=False)


def _zero() -> Tensor:
    return Tensor(0.0)


def _per_sample(t: Tensor) -> Tensor:
    """View anything with a leading batch axis as ``[N, K]``; 1-D input is one sample."""
    if t.data.ndim == 1:
        return nx.reshape(t, (1, t.shape[0]))
    return nx.reshape(t, (t.shape[0], -1))


def cross_entropy(
    probs: Tensor, labels: Sequence[int | None], labeled: Sequence[bool], eps: float = 1e-8
) -> Tensor:
    """Mean of ``-log p[label]`` over labeled rows; 0 when none are labeled."""
    n_cls = probs.shape[1]
    rows = [i for i, flag in enumerate(labeled) if flag]
    if not rows:
        return _zero()
    ids = []
    for i in rows:
        lab = labels[i]
        if lab is None or not 0 <= int(lab) < n_cls:
            raise DataError(f"label {lab!r} invalid for {n_cls} classes")
        ids.append(int(lab))
    p = nx.pick(nx.take_rows(probs, rows), ids)
    return nx.scale(nx.mean(nx.log(nx.clamp_min(p, eps))), -1.0)


def attention_loss(
    f: Tensor, seg: Tensor | np.ndarray, lambda_a: float, lambda_r: float, eps: float = 1e-8
) -> Tensor:
    """Attention supervision toward a binary mask, averaged over samples.

    Per sample::

        lambda_a * sum((f - S)^2) / (sum f + sum S + eps)
          + lambda_r * (1 - sum(f * S) / sum f)

    with the second term evaluated as ``sum(f * (1 - S)) / (sum f + eps)``.

    A term whose weight is 0 is skipped entirely. ``f`` must already be on
    the mask's lattice.
    """
    S = seg if isinstance(seg, Tensor) else Tensor(seg)
    if f.shape != S.shape:
        raise DimensionError(f"attention {f.shape} vs mask {S.shape}")
    if np.any(f.data < 0) or np.any(f.data > 1):
        raise ActivationError("attention values outside [0, 1]")
    if not np.all((S.data == 0) | (S.data == 1)):
        raise DataError("segmentation mask must be binary")
    f2, s2 = _per_sample(f), _per_sample(S.detach())
    sum_f = nx.sum_axes(f2, (1,))
    total = None
    if lambda_a:
        num = nx.sum_axes(nx.square(nx.sub(f2, s2)), (1,))
        den = nx.shift(nx.add(sum_f, nx.sum_axes(s2, (1,))), eps)
        total = nx.scale(nx.div(num, den), lambda_a)
    if lambda_r:
        # 1 - sum(f*S)/sum(f) written as sum(f*(1-S))/sum(f): exactly 0 when f lies inside S
        outside = nx.sum_axes(nx.mul(f2, nx.shift(nx.scale(s2, -1.0), 1.0)), (1,))
        reg = nx.scale(nx.div(outside, nx.shift(sum_f, eps)), lambda_r)
        total = reg if total is None else nx.add(total, reg)
    if total is None:
        return _zero()
    return nx.mean(total)


def classification_consistency(p_s: Tensor, p_t: Tensor) -> Tensor:
    """Per-sample mean over classes of ``(p_s - p_t)^2``, averaged over the batch."""
    if p_s.shape != p_t.shape:
        raise DimensionError(f"student {p_s.shape} vs teacher {p_t.shape}")
    return nx.mean(nx.square(nx.sub(p_s, p_t.detach())))


def attention_consistency(f_s: Tensor, f_t: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-sample ``sum((f_s - f_t)^2) / (sum f_s + sum f_t + eps)``, batch-averaged.

    The ratio is invariant to nearest-neighbour upsampling, so it can be
    taken on the native attention lattice.
    """
    if f_s.shape != f_t.shape:
        raise DimensionError(f"student {f_s.shape} vs teacher {f_t.shape}")
    a, b = _per_sample(f_s), _per_sample(f_t.detach())
    num = nx.sum_axes(nx.square(nx.sub(a, b)), (1,))
    den = nx.shift(nx.add(nx.sum_axes(a, (1,)), nx.sum_axes(b, (1,))), eps)
    return nx.mean(nx.div(num, den))


def rampup_weight(tau: int, tau_max: int) -> float:
    """``exp(-5 (1 - tau/tau_max)^2)``, held at 1 beyond ``tau_max``."""
    if tau_max <= 0:
        raise ConfigError("tau_max must be positive")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau >= tau_max:
        return 1.0
    return math.exp(-5.0 * (1.0 - tau / tau_max) ** 2)


def total_loss(
    student: ForwardOutput,
    teacher: ForwardOutput,
    labels: Sequence[int | None],
    labeled: Sequence[bool],
    segs: Sequence[np.ndarray | None],
    tau: int,
    config: LossConfig,
    *,
    use_attention: bool = True,
    use_cc: bool = True,
    use_ac: bool = True,
) -> LossBreakdown:
    """Assemble ``L_c + L_a + w(tau) L_cc + w(tau) L_ac``.

    ``L_c`` uses labeled rows only. ``L_a`` uses rows whose mask is visible:
    labeled rows, plus unlabeled rows when ``attention_on_unlabeled`` is set.
    Both consistency terms cover the whole batch.
    """
    l_c = cross_entropy(student.probs, labels, labeled, config.eps)

    l_a = _zero()
    if use_attention and (config.lambda_a or config.lambda_r):
        rows = [
            i
            for i, flag in enumerate(labeled)
            if (flag or config.attention_on_unlabeled) and segs[i] is not None
        ]
        if rows:
            size = segs[rows[0]].shape[-1]
            f = upsample_attention(nx.take_rows(student.attention, rows), size)
            S = np.stack([np.asarray(segs[i], dtype=np.float64) for i in rows])[:, None]
            l_a = attention_loss(f, S, config.lambda_a, config.lambda_r, config.eps)

    w = rampup_weight(tau, config.tau_max)
    l_cc = classification_consistency(student.probs, teacher.probs) if use_cc else _zero()
    l_ac = attention_consistency(student.attention, teacher.attention, config.eps) if use_ac else _zero()

    total = nx.add(l_c, l_a)
    if use_cc:
        total = nx.add(total, nx.scale(l_cc, w))
    if use_ac:
        total = nx.add(total, nx.scale(l_ac, w))
    return LossBreakdown(
        l_c=l_c.item(),
        l_a=l_a.item(),
        l_cc=l_cc.item(),
        l_ac=l_ac.item(),
        w_tau=w,
        l_total=total.item(),
        total=total,
    )
