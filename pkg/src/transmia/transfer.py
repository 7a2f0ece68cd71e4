"""Network-based transfer: reuse a source net's shallow stack in a new net."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .errors import RejectedPlanError, RejectedSplitError
from .nn import LayeredNet, TrainConfig, init_net, train
from .seeding import derive_seed


class TransferMode(enum.Enum):
    FREEZING = "freezing"
    FINE_TUNING = "fine_tuning"


def split(net: LayeredNet) -> tuple[LayeredNet, LayeredNet]:
    """Cut ``net`` at its split index into (shallow, deep).

    The shallow stack keeps ``split_index == num_layers`` (it has no deep
    part); the deep stack has ``split_index == 0``.  Feeding
    ``transform(shallow, x)`` into ``forward(deep, .)`` reproduces
    ``forward(net, x)`` bit for bit.
    """
    s = net.split_index
    if not 0 < s < net.num_layers:
        raise RejectedSplitError(
            f"split_index {s} must lie strictly inside (0, {net.num_layers})")
    shallow = LayeredNet(net.layers[:s], s)
    deep = LayeredNet(net.layers[s:], 0)
    return shallow, deep


def compose(shallow: LayeredNet, deep: LayeredNet) -> LayeredNet:
    if shallow.out_dim != deep.in_dim:
        raise RejectedPlanError(
            f"shallow stack outputs {shallow.out_dim} features, deep stack expects {deep.in_dim}")
    return LayeredNet(shallow.layers + deep.layers, shallow.num_layers)


@dataclass(frozen=True)
class TransferPlan:
    """How to build a target net on top of a borrowed shallow stack.

    ``target_head_dims`` runs from the seam width to the number of target
    classes, e.g. ``(32, 10)`` for a single fresh output layer.
    """

    source_shallow: LayeredNet
    target_head_dims: tuple[int, ...]
    mode: TransferMode
    train_cfg: TrainConfig
    head_activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.target_head_dims)
        object.__setattr__(self, "target_head_dims", dims)
        if len(dims) < 2:
            raise RejectedPlanError("target head needs at least an input and an output width")
        if self.source_shallow.out_dim != dims[0]:
            raise RejectedPlanError(
                f"shallow stack outputs {self.source_shallow.out_dim} features but the "
                f"target head starts at width {dims[0]}")


def fresh_head(dims: Sequence[int], activation: str, seed: int) -> LayeredNet:
    return init_net(dims, activation=activation, split_index=0,
                    seed=derive_seed(seed, "head-init"))


def transfer_train(plan: TransferPlan, target_data, select_on=None) -> LayeredNet:
    """Train ``h_T`` (and, when fine-tuning, ``g_T``) on ``target_data``.

    The shallow stack starts as a copy of ``plan.source_shallow``.  Freezing
    keeps it fixed; fine-tuning updates every layer with one learning rate.
    """
    g = plan.source_shallow
    if target_data.dim != g.in_dim:
        raise RejectedPlanError(
            f"target data has {target_data.dim} features, shallow stack expects {g.in_dim}")
    head = fresh_head(plan.target_head_dims, plan.head_activation, plan.train_cfg.seed)
    net = compose(g, head)
    tune_shallow = plan.mode is TransferMode.FINE_TUNING
    mask = [tune_shallow] * g.num_layers + [True] * head.num_layers
    return train(net, target_data, plan.train_cfg, mask, select_on=select_on)
