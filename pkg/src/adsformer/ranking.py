"""Deep & cross ranking networks for CTR and PCCVR, plus the BCE objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .adpm import ADPM, ADPMConfig, ADPMInputs
from .autograd import Tensor
from .embeddings import PretrainedBundle

FULL_DEEP_SIZES = {"ctr": (5000, 2500, 250, 500), "pccvr": (240, 120)}
FULL_NUM_CROSS = {"ctr": 4, "pccvr": 2}
DEFAULT_WIDTH_DIVISOR = {"ctr": 50, "pccvr": 5}
PROB_CLAMP = 1e-7
# float64 sigmoid rounds to exactly 0 or 1 past |z| ~ 37; keep p in the open interval
P_OPEN = (np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def probability(z: Tensor) -> Tensor:
    """Sigmoid clamped to the open unit interval (monotone, so rankings are unchanged)."""
    return ag.clip(ag.sigmoid(z), *P_OPEN)


def cross_layer(x0: Tensor, xl: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x0 * (xl @ W + b) + xl`` on row vectors."""
    if not (x0.shape[-1] == xl.shape[-1] == W.shape[0] == W.shape[1] == b.shape[-1]):
        raise ag.ShapeError(f"cross layer widths disagree: x0 {x0.shape}, xl {xl.shape}, "
                            f"W {W.shape}, b {b.shape}")
    return x0 * (ag.matmul(xl, W) + b) + xl


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pc = ag.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = ag.log(pc) * y + ag.log(1.0 - pc) * (1.0 - y)
    return -ag.tmean(ll)


class BatchNorm:
    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum, self.eps = momentum, eps

    def parameters(self) -> list[Tensor]:
        return [self.gain, self.bias]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training and x.shape[0] > 1:
            mu = ag.tmean(x, axis=0, keepdims=True)
            centered = x - mu
            var = ag.tmean(centered * centered, axis=0, keepdims=True)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.data[0]
            self.running_var = m * self.running_var + (1 - m) * var.data[0]
            return centered / ag.sqrt(var + self.eps) * self.gain + self.bias
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * scale * self.gain + self.bias


def _glorot(rng, fan_in, fan_out, name):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), requires_grad=True, name=name)


def desk_deep_sizes(task: str, divisor: float | None = None) -> tuple[int, ...]:
    divisor = DEFAULT_WIDTH_DIVISOR[task] if divisor is None else divisor
    return tuple(max(1, int(round(s / divisor))) for s in FULL_DEEP_SIZES[task])


@dataclass
class DCNConfig:
    task: str = "ctr"
    num_cross: int | None = None
    deep_sizes: tuple[int, ...] | None = None
    width_divisor: float | None = None
    topology: str = "parallel"
    batch_norm: bool = True
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9

    def resolved(self) -> "DCNConfig":
        if self.task not in FULL_DEEP_SIZES:
            raise ValueError(f"task must be 'ctr' or 'pccvr', got {self.task!r}")
        if self.topology not in ("parallel", "serial"):
            raise ValueError(f"topology must be 'parallel' or 'serial', got {self.topology!r}")
        num_cross = FULL_NUM_CROSS[self.task] if self.num_cross is None else self.num_cross
        deep = self.deep_sizes or desk_deep_sizes(self.task, self.width_divisor)
        return DCNConfig(self.task, num_cross, tuple(deep), self.width_divisor, self.topology,
                         self.batch_norm, self.leaky_slope, self.bn_momentum)


class DCN:
    """Cross stack and deep stack over the wide input, joined by a sigmoid head.

    ``parallel`` concatenates the cross and deep outputs before the head;
    ``serial`` feeds the cross output into the deep stack.
    """

    def __init__(self, input_dim: int, config: DCNConfig, rng: np.random.Generator):
        self.config = cfg = config.resolved()
        self.input_dim = input_dim
        self.cross = [(Tensor(rng.normal(0, 1.0 / math.sqrt(input_dim), size=(input_dim, input_dim)) * 0.5,
                              requires_grad=True, name=f"cross{i}.W"),
                       Tensor(np.zeros(input_dim), requires_grad=True, name=f"cross{i}.b"))
                      for i in range(cfg.num_cross)]
        self.deep = []
        width = input_dim
        for i, size in enumerate(cfg.deep_sizes):
            W = _glorot(rng, width, size, f"deep{i}.W")
            b = Tensor(np.zeros(size), requires_grad=True, name=f"deep{i}.b")
            bn = BatchNorm(size, cfg.bn_momentum, name=f"deep{i}.bn") if cfg.batch_norm else None
            self.deep.append((W, b, bn))
            width = size
        head_in = (input_dim + width) if cfg.topology == "parallel" else width
        if not cfg.deep_sizes and cfg.topology == "parallel":
            head_in = input_dim
        self.head_W = _glorot(rng, head_in, 1, "head.W")
        self.head_b = Tensor(np.zeros(1), requires_grad=True, name="head.b")

    def parameters(self) -> list[Tensor]:
        params = [t for pair in self.cross for t in pair]
        for W, b, bn in self.deep:
            params.extend([W, b])
            if bn is not None:
                params.extend(bn.parameters())
        return params + [self.head_W, self.head_b]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (_, _, bn) in enumerate(self.deep):
            if bn is not None:
                out[f"deep{i}.bn.running_mean"] = bn.running_mean
                out[f"deep{i}.bn.running_var"] = bn.running_var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, (_, _, bn) in enumerate(self.deep):
            if bn is not None:
                bn.running_mean = np.array(buffers[f"deep{i}.bn.running_mean"], dtype=np.float64)
                bn.running_var = np.array(buffers[f"deep{i}.bn.running_var"], dtype=np.float64)

    def _deep(self, x: Tensor, training: bool) -> Tensor:
        for W, b, bn in self.deep:
            x = ag.matmul(x, W) + b
            if bn is not None:
                x = bn(x, training)
            x = ag.leaky_relu(x, self.config.leaky_slope)
        return x

    def logits(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise ag.ShapeError(f"wide input width {x.shape[-1]} != model input {self.input_dim}")
        xc = x
        for W, b in self.cross:
            xc = cross_layer(x, xc, W, b)
        if self.config.topology == "serial":
            h = self._deep(xc, training)
        elif self.deep:
            h = ag.concat([xc, self._deep(x, training)], axis=-1)
        else:
            h = xc
        return ag.reshape(ag.matmul(h, self.head_W) + self.head_b, (x.shape[0],))

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return probability(self.logits(x, training))


@dataclass
class RankerConfig:
    task: str = "ctr"
    context_dim: int = 0
    adpm: ADPMConfig | None = None
    dcn: DCNConfig = field(default_factory=DCNConfig)


class PersonalizedRanker:
    """Wide input ``concat(context, u)`` fed to a DCN; ``adpm=None`` gives the baseline."""

    def __init__(self, config: RankerConfig, rng: np.random.Generator,
                 pretrained: PretrainedBundle | None = None):
        self.config = config
        self.adpm = ADPM(config.adpm, rng, pretrained) if config.adpm is not None else None
        width = config.context_dim + (config.adpm.output_dim if config.adpm is not None else 0)
        if width == 0:
            raise ValueError("ranker has an empty wide input")
        self.dcn = DCN(width, config.dcn, rng)

    @property
    def wide_dim(self) -> int:
        return self.dcn.input_dim

    def parameters(self) -> list[Tensor]:
        params = self.adpm.parameters() if self.adpm is not None else []
        return params + self.dcn.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, p in enumerate(self.parameters()):
            out[p.name or f"param{i}"] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every trainable parameter, batch-norm buffer and frozen table, by unique name."""
        state = {name: p.data for name, p in self.named_parameters().items()}
        if len(state) != len(self.parameters()):
            raise ValueError("parameter names are not unique")
        state.update(self.dcn.buffers())
        if self.adpm is not None:
            for flavor in (self.adpm.config.pretrained_flavors if self.adpm.config.use_component2 else ()):
                state[f"pretrained.{flavor}"] = self.adpm.pretrained[flavor].weights.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in state:
                raise KeyError(f"checkpoint lacks parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        self.dcn.load_buffers(state)

    def wide_input(self, context: np.ndarray, inputs: ADPMInputs | None, training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
        parts = []
        if self.config.context_dim:
            parts.append(Tensor(np.asarray(context, dtype=np.float64)))
        if self.adpm is not None:
            parts.append(self.adpm(inputs, training, rng).u)
        return parts[0] if len(parts) == 1 else ag.concat(parts, axis=-1)

    def logits(self, context: np.ndarray, inputs: ADPMInputs | None, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        return self.dcn.logits(self.wide_input(context, inputs, training, rng), training)

    def forward(self, context: np.ndarray, inputs: ADPMInputs | None, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return probability(self.logits(context, inputs, training, rng))
