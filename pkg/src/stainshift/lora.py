"""Low-rank adapters wrapped around frozen Linear/Conv2d layers."""

from __future__ import annotations

import copy
import fnmatch
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scaling: float = 1.0):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = scaling
        self.lora_down = nn.Linear(base.in_features, rank, bias=False)
        self.lora_up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.kaiming_uniform_(self.lora_down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_up.weight)

    def forward(self, x):
        return self.base(x) + self.scaling * self.lora_up(self.lora_down(x))

    def delta_weight(self):
        return self.scaling * self.lora_up.weight @ self.lora_down.weight


class LoraConv2d(nn.Module):
    """Delta factorised as a k x k conv into ``rank`` channels followed by a 1x1 conv."""

    def __init__(self, base: nn.Conv2d, rank: int, scaling: float = 1.0):
        super().__init__()
        if base.groups != 1:
            raise ConfigError("grouped convolutions cannot take adapters")
        self.base = base
        self.rank = rank
        self.scaling = scaling
        self.lora_down = nn.Conv2d(base.in_channels, rank, base.kernel_size, stride=base.stride,
                                   padding=base.padding, dilation=base.dilation,
                                   padding_mode=base.padding_mode, bias=False)
        self.lora_up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.kaiming_uniform_(self.lora_down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.lora_up.weight)

    def forward(self, x):
        return self.base(x) + self.scaling * self.lora_up(self.lora_down(x))

    def delta_weight(self):
        up = self.lora_up.weight.flatten(1)  # out x r
        down = self.lora_down.weight.flatten(1)  # r x (in*k*k)
        return (self.scaling * up @ down).view_as(self.base.weight)


LORA_TYPES = (LoraLinear, LoraConv2d)


@dataclass
class LoraAdapterSet:
    rank: int
    scaling: float
    target_layers: list
    layers: dict

    def deltas(self):
        return {name: (m.lora_up.weight, m.lora_down.weight) for name, m in self.layers.items()}

    def num_parameters(self):
        return sum(m.lora_up.weight.numel() + m.lora_down.weight.numel() for m in self.layers.values())


def adaptable_layers(module: nn.Module):
    """Qualified names of the Linear/Conv2d layers an adapter can wrap."""
    return [n for n, m in module.named_modules() if isinstance(m, (nn.Linear, nn.Conv2d))]


def select_layers(module, targets="all"):
    names = adaptable_layers(module)
    if targets in ("all", None):
        return names
    if isinstance(targets, str):
        targets = [targets]
    chosen = []
    for pattern in targets:
        hits = [n for n in names if fnmatch.fnmatchcase(n, pattern)]
        if not hits:
            raise ConfigError(f"adapter target {pattern!r} matches no layer")
        chosen.extend(h for h in hits if h not in chosen)
    return [n for n in names if n in chosen]


def inject_adapters(module: nn.Module, rank: int = 8, scaling: float = 1.0,
                    targets="all", seed: int = 0) -> nn.Module:
    """Return a copy of ``module`` with adapters on the targeted layers.

    The copy shares every base parameter and buffer with ``module`` (same
    tensor objects, frozen); only the new adapter weights are trainable.
    Calling this twice on one base gives two independent adapter sets.
    """
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    names = select_layers(module, targets)
    memo = {id(t): t for t in list(module.parameters()) + list(module.buffers())}
    adapted = copy.deepcopy(module, memo)
    adapted.requires_grad_(False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for name in names:
            parent_name, _, attr = name.rpartition(".")
            parent = adapted.get_submodule(parent_name) if parent_name else adapted
            base = getattr(parent, attr)
            wrap = LoraLinear if isinstance(base, nn.Linear) else LoraConv2d
            setattr(parent, attr, wrap(base, rank, scaling))
    return adapted


def adapter_set(module: nn.Module) -> LoraAdapterSet:
    layers = {n: m for n, m in module.named_modules() if isinstance(m, LORA_TYPES)}
    first = next(iter(layers.values()), None)
    return LoraAdapterSet(rank=first.rank if first else 0, scaling=first.scaling if first else 0.0,
                          target_layers=list(layers), layers=layers)
