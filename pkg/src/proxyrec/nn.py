"""Parameters, modules and the decoupled-weight-decay optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, ConfigError, Tensor


class Parameter(Tensor):
    __slots__ = ("name", "decay_exempt")

    def __init__(self, values, name: str = "", decay_exempt: bool = False, dtype=None):
        super().__init__(values, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay_exempt = decay_exempt


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype or T.get_default_dtype())


class Module:
    """Minimal container that discovers parameters and submodules by attribute."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> list[Parameter]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return int(np.sum([p.values.size for _, p in self.named_parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise T.DimensionError(f"{name}: {state[name].shape} != {p.shape}")
            p.values = state[name].astype(p.dtype, copy=True)


class Linear(Module):
    """y = x W + b with Xavier-uniform W and zero b."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, fan_in, fan_out))
        self.bias = (
            Parameter(np.zeros(fan_out, dtype=T.get_default_dtype()), decay_exempt=True)
            if bias
            else None
        )

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 1:
            return T.reshape(self(T.reshape(x, (1, -1))), (-1,))
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class Norm(Module):
    """Row normalisation: LayerNorm with learned gain/shift, or plain L2."""

    def __init__(self, dim: int, kind: str = "layer_norm"):
        if kind not in ("layer_norm", "l2_norm"):
            raise ConfigError(f"unknown normalization {kind!r}")
        self.kind = kind
        if kind == "layer_norm":
            dtype = T.get_default_dtype()
            self.gain = Parameter(np.ones(dim, dtype=dtype), decay_exempt=True)
            self.shift = Parameter(np.zeros(dim, dtype=dtype), decay_exempt=True)

    def __call__(self, x) -> Tensor:
        if self.kind == "l2_norm":
            return T.l2_normalize_rows(x)
        return T.add(T.mul(T.layer_norm_rows(x), self.gain), self.shift)


@dataclass
class AdamW:
    """Adam with weight decay applied directly to the weights.

    Decay is skipped for ``decay_exempt`` parameters.  Gradients are reset
    to zero after every step.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")

    def step(self, params: list[Parameter]) -> None:
        for p in params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in params:
            g = p.grad
            m = self.first_moment.get(p.name)
            v = self.second_moment.get(p.name)
            if m is None:
                m = np.zeros_like(p.values)
                v = np.zeros_like(p.values)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.first_moment[p.name] = m
            self.second_moment[p.name] = v
            if self.weight_decay and not p.decay_exempt:
                p.values = p.values * (1.0 - lr * self.weight_decay)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.values = (p.values - update).astype(p.dtype, copy=False)
            p.grad = np.zeros_like(p.values)

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "first_moment": self.first_moment,
            "second_moment": self.second_moment,
        }
