"""Gradient audit: finite differences against every primitive and the full loss."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from . import numerics as nx
from .losses import LossConfig, total_loss
from .model import NetworkConfig, forward, init_pair
from .numerics import GradCheckReport, Tensor

# name -> (function of leaf tensors, input shapes); inputs are drawn from U(-1, 1)
PRIMITIVES: dict[str, tuple[Callable[..., Tensor], list[tuple[int, ...]]]] = {
    "add": (lambda a, b: nx.add(a, b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nx.mul(a, b), [(3, 4), (3, 4)]),
    # keep the denominator away from zero
    "div": (lambda a, b: nx.div(a, nx.shift(nx.square(b), 0.5)), [(3, 4), (3, 4)]),
    "scale": (lambda a: nx.scale(a, -1.7), [(5,)]),
    "shift": (lambda a: nx.shift(a, 0.3), [(5,)]),
    "square": (lambda a: nx.square(a), [(5,)]),
    "relu": (lambda a: nx.relu(a), [(6,)]),
    "sigmoid": (lambda a: nx.sigmoid(a), [(6,)]),
    "log": (lambda a: nx.log(nx.shift(nx.square(a), 0.2)), [(6,)]),
    "clamp_min": (lambda a: nx.clamp_min(a, -0.5), [(6,)]),
    "softmax": (lambda a: nx.softmax(a), [(3, 4)]),
    "sum_axes": (lambda a: nx.sum_axes(a, (1, 2)), [(2, 3, 4)]),
    "mean": (lambda a: nx.mean(a), [(2, 3)]),
    "reshape": (lambda a: nx.reshape(a, (4, 6)), [(2, 3, 4)]),
    "take_rows": (lambda a: nx.take_rows(a, [2, 0, 2]), [(3, 4)]),
    "pick": (lambda a: nx.pick(a, [1, 0, 3]), [(3, 4)]),
    "add_bias": (lambda a, b: nx.add_bias(a, b), [(2, 3, 2, 2), (3,)]),
    "matmul": (lambda a, b: nx.matmul(a, b), [(3, 4), (4, 2)]),
    "linear": (lambda a, w, b: nx.linear(a, w, b), [(3, 4), (2, 4), (2,)]),
    "global_avg_pool": (lambda a: nx.global_avg_pool(a), [(2, 3, 4, 4)]),
    # a mask in (0, 1] keeps the denominator away from zero
    "attention_pool": (lambda x, a: nx.attention_pool(x, nx.sigmoid(a)), [(2, 3, 4, 4), (2, 1, 4, 4)]),
    "max_pool2d": (lambda a: nx.max_pool2d(a, 2), [(2, 2, 4, 4)]),
    "upsample_nearest": (lambda a: nx.upsample_nearest(a, 3), [(2, 1, 2, 2)]),
    "conv2d": (lambda x, k, b: nx.conv2d(x, k, b, 1, 1), [(2, 2, 4, 4), (3, 2, 3, 3), (3,)]),
    "conv2d_strided": (lambda x, k, b: nx.conv2d(x, k, b, 2, 1), [(1, 2, 5, 5), (2, 2, 3, 3), (2,)]),
    "concat_rows": (lambda a, b: nx.concat_rows([a, b]), [(2, 3), (1, 3)]),
}


def check_primitive(name: str, h: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Check one primitive through a random linear probe of its output."""
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [Tensor(rng.uniform(-1, 1, size=s), requires_grad=True) for s in shapes]
    base = Tensor(fn(*params).data.copy())
    probe = Tensor(rng.uniform(-1, 1, size=base.shape))

    # probing the deviation from the base output keeps the loss O(h), so the
    # differences are not swamped by roundoff of an O(1) total
    def loss() -> Tensor:
        return nx.sum_axes(nx.mul(nx.sub(fn(*params), base), probe))

    return nx.finite_difference_check(loss, params, h=h, tol=tol)


def audit_primitives(h: float = 1e-5, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    return {name: check_primitive(name, h, tol) for name in PRIMITIVES}


def audit_student_loss(
    n: int = 8, size: int = 16, seed: int = 0, h: float = 1e-5, tol: float = 1e-4
) -> GradCheckReport:
    """Check the full four-term student objective on an ``n``-sample batch.

    Half the batch is labeled. The teacher is a perturbed copy of the
    student so that both consistency terms are active, and the ramp-up sits
    mid-schedule.
    """
    net = NetworkConfig(input_size=size, conv_widths=(4, 6, 8, 8), seed=seed)
    pair = init_pair(net)
    rng = np.random.default_rng(seed)
    for t in pair.teacher.values():
        t.data += rng.normal(0.0, 0.05, size=t.shape)
    # dense random inputs keep every unit active, so no gradient entry sits at the roundoff floor
    x = rng.uniform(-1.0, 1.0, size=(n, 1, size, size))
    labeled = [i < n // 2 for i in range(n)]
    labels = [i % net.num_classes if f else None for i, f in enumerate(labeled)]
    segs = [(rng.random((size, size)) < 0.3).astype(np.uint8) if f else None for f in labeled]
    cfg = LossConfig(tau_max=10)
    t_out = forward(pair.teacher, x, net)

    def loss() -> Tensor:
        s_out = forward(pair.student, x, net)
        return total_loss(s_out, t_out, labels, labeled, segs, 5, cfg).total

    return nx.finite_difference_check(loss, pair.student, h=h, tol=tol)
