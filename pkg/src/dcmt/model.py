"""Two-head CNN shared by the student and the teacher.

The trunk is four 3x3 conv blocks (the first two followed by 2x2 max-pool).
The classification head pools the final feature map globally and applies a
linear layer plus softmax; the attention head is a 1x1 conv plus sigmoid on
the same feature map, so the map lives at ``input_size / attention_stride``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class NetworkConfig:
    input_size: int = 32
    channels: int = 1
    num_classes: int = 3
    attention_stride: int = 4
    conv_widths: tuple[int, ...] = (16, 32, 64, 64)
    # "attention": class features are the attention-weighted mean of the final map; "average": plain mean
    pooling: str = "attention"
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.conv_widths) != 4 or any(w < 1 for w in self.conv_widths):
            raise ConfigError("conv_widths must hold four positive widths")
        if self.pooling not in ("attention", "average"):
            raise ConfigError(f"pooling must be 'attention' or 'average', got {self.pooling!r}")
        if self.attention_stride != 4:
            # two 2x2 pools fix the trunk's output stride
            raise ConfigError("attention_stride must be 4 for this trunk")
        if self.input_size < 1 or self.input_size % self.attention_stride:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by attention_stride {self.attention_stride}"
            )

    @property
    def attention_size(self) -> int:
        return self.input_size // self.attention_stride


Params = dict[str, Tensor]


@dataclass
class ModelPair:
    student: Params
    teacher: Params
    config: NetworkConfig = field(default_factory=NetworkConfig)

    def check(self) -> None:
        if self.student.keys() != self.teacher.keys():
            raise ValueError("student/teacher parameter names differ")
        for k, s in self.student.items():
            if s.shape != self.teacher[k].shape:
                raise ValueError(f"shape mismatch for {k}")


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: Tensor
    attention: Tensor


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; a pure function of the config."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.channels
    for i, width in enumerate(config.conv_widths, start=1):
        shapes[f"conv{i}.w"] = (width, c_in, 3, 3)
        shapes[f"conv{i}.b"] = (width,)
        c_in = width
    shapes["att.w"] = (1, c_in, 1, 1)
    shapes["att.b"] = (1,)
    shapes["fc.w"] = (config.num_classes, c_in)
    shapes["fc.b"] = (config.num_classes,)
    return shapes


def parameter_count(config: NetworkConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: NetworkConfig) -> Params:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 2.0 if name.startswith("conv") else 1.0
            data = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return params


def copy_params(params: Params, requires_grad: bool = False) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


def init_pair(config: NetworkConfig) -> ModelPair:
    student = init_params(config)
    return ModelPair(student=student, teacher=copy_params(student), config=config)


def forward(params: Params, batch: Tensor | np.ndarray, config: NetworkConfig) -> ForwardOutput:
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 4 or batch.shape[1:] != (config.channels, config.input_size, config.input_size):
        raise DimensionError(
            f"expected [N,{config.channels},{config.input_size},{config.input_size}], got {batch.shape}"
        )
    h = batch
    for i in range(1, 5):
        h = nx.relu(nx.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=1, padding=1))
        if i <= 2:
            h = nx.max_pool2d(h, 2)
    attention = nx.sigmoid(nx.conv2d(h, params["att.w"], params["att.b"]))
    pooled = nx.attention_pool(h, attention) if config.pooling == "attention" else nx.global_avg_pool(h)
    logits = nx.linear(pooled, params["fc.w"], params["fc.b"])
    return ForwardOutput(logits=logits, probs=nx.softmax(logits), attention=attention)


def upsample_attention(mask: Tensor, target: int) -> Tensor:
    """Nearest-neighbour upsample of ``[N,1,h,w]`` to ``[N,1,target,target]``."""
    if mask.data.ndim != 4:
        raise DimensionError(f"expected [N,1,h,w], got {mask.shape}")
    h, w = mask.shape[2:]
    if h != w or target < h or target % h:
        raise DimensionError(f"cannot upsample {h}x{w} to {target}x{target}")
    if target == h:
        return mask
    return nx.upsample_nearest(mask, target // h)
