"""Shadow-model ensembles and the membership-labeled attack training set."""

from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import RejectedPlanError
from .nn import LayeredNet, TrainConfig, forward, init_net, train
from .seeding import derive_seed, rng
from .transfer import TransferMode, TransferPlan, transfer_train


class Regime(enum.Enum):
    BASELINE = "baseline"
    FREEZING = "freezing"
    FINE_TUNING = "fine_tuning"

    @property
    def transfer_mode(self) -> TransferMode | None:
        if self is Regime.FREEZING:
            return TransferMode.FREEZING
        if self is Regime.FINE_TUNING:
            return TransferMode.FINE_TUNING
        return None


@dataclass(frozen=True)
class ShadowPlan:
    """Everything needed to sample and train ``num_shadows`` shadow models.

    ``shadow_dims`` is the full layer-width list of a shadow net (input,
    hidden..., classes) and ``split_index`` says where its shallow stack
    ends.  For the transfer regimes the first ``split_index`` layers are
    replaced by ``source_shallow``, whose output width must equal
    ``shadow_dims[split_index]``.
    """

    num_shadows: int
    shadow_size: int
    regime: Regime
    shadow_dims: tuple[int, ...]
    train_cfg: TrainConfig
    source_shallow: LayeredNet | None = None
    split_index: int | None = None
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.shadow_dims)
        object.__setattr__(self, "shadow_dims", dims)
        split = len(dims) - 2 if self.split_index is None else int(self.split_index)
        object.__setattr__(self, "split_index", split)
        if self.num_shadows < 1 or self.shadow_size < 1:
            raise RejectedPlanError("num_shadows and shadow_size must be positive")
        if len(dims) < 2:
            raise RejectedPlanError(f"shadow_dims {dims} needs input and output widths")
        if (self.source_shallow is None) != (self.regime is Regime.BASELINE):
            raise RejectedPlanError(
                "a shallow stack is required for the transfer regimes and forbidden for baseline")
        if self.source_shallow is not None:
            if not 0 < split < len(dims) - 1:
                raise RejectedPlanError(f"split_index {split} leaves no shallow or no deep layers")
            g = self.source_shallow
            if g.in_dim != dims[0] or g.out_dim != dims[split]:
                raise RejectedPlanError(
                    f"shallow stack maps {g.in_dim}->{g.out_dim} but the shadow "
                    f"architecture needs {dims[0]}->{dims[split]} at the seam")

    @property
    def head_dims(self) -> tuple[int, ...]:
        return self.shadow_dims[self.split_index:]


@dataclass(frozen=True)
class ShadowEnsemble:
    models: tuple[LayeredNet, ...]
    per_model_train: tuple[LabeledDataset, ...]
    per_model_test: tuple[LabeledDataset, ...]

    def __post_init__(self):
        if not len(self.models) == len(self.per_model_train) == len(self.per_model_test):
            raise RejectedPlanError("models, train sets and test sets must align")

    def __len__(self) -> int:
        return len(self.models)


def sample_shadow_datasets(pool_train: LabeledDataset, pool_test: LabeledDataset,
                           plan: ShadowPlan, seed: int
                           ) -> tuple[list[LabeledDataset], list[LabeledDataset]]:
    """Draw each shadow's train and test sets uniformly without replacement.

    Draws are independent across shadows, so sets of different shadows may
    overlap.  Shadow ``i`` uses the generator seeded by ``derive_seed(seed, i)``.
    """
    n = plan.shadow_size
    if n > len(pool_train) or n > len(pool_test):
        raise RejectedPlanError(
            f"shadow_size {n} exceeds a pool (train {len(pool_train)}, test {len(pool_test)})")
    trains, tests = [], []
    for i in range(plan.num_shadows):
        gen = rng(derive_seed(seed, i))
        trains.append(pool_train.subset(np.sort(gen.choice(len(pool_train), n, replace=False))))
        tests.append(pool_test.subset(np.sort(gen.choice(len(pool_test), n, replace=False))))
    return trains, tests


def train_shadow_model(plan: ShadowPlan, data: LabeledDataset, seed: int) -> LayeredNet:
    cfg = plan.train_cfg.with_seed(seed)
    mode = plan.regime.transfer_mode
    if mode is None:
        net = init_net(plan.shadow_dims, plan.activation, plan.split_index,
                       seed=derive_seed(seed, "init"))
        return train(net, data, cfg)
    tplan = TransferPlan(plan.source_shallow, plan.head_dims, mode, cfg, plan.activation)
    return transfer_train(tplan, data)


def train_shadow_ensemble(plan: ShadowPlan, sampled, seed: int = 0,
                          workers: int = 1) -> ShadowEnsemble:
    """Train one shadow per sampled training set.

    Shadow ``i`` trains with seed ``derive_seed(seed, "shadow", i)``; results
    are ordered by shadow index whatever the worker count.
    """
    trains, tests = sampled
    if len(trains) != len(tests):
        raise RejectedPlanError("train and test lists differ in length")
    seeds = [derive_seed(seed, "shadow", i) for i in range(len(trains))]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(lambda a: train_shadow_model(plan, *a), zip(trains, seeds)))
    else:
        models = [train_shadow_model(plan, d, s) for d, s in zip(trains, seeds)]
    return ShadowEnsemble(tuple(models), tuple(trains), tuple(tests))


@dataclass(frozen=True)
class AttackRecord:
    record_id: object
    label: int
    prediction: np.ndarray
    member: bool

    @property
    def membership(self) -> str:
        return "in" if self.member else "out"


@dataclass(frozen=True, eq=False)
class AttackSet:
    """Column-oriented attack training data (rows of ``D_A^train``).

    ``member`` is True for IN records.  ``shadow`` records which shadow
    model produced each prediction.
    """

    record_ids: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    member: np.ndarray
    shadow: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.labels)
        if self.shadow is None:
            object.__setattr__(self, "shadow", np.full(n, -1, dtype=np.int64))
        if not (len(self.record_ids) == n == len(self.predictions) == len(self.member)
                == len(self.shadow)):
            raise RejectedPlanError("attack set columns differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[AttackRecord]:
        for rid, y, v, m in zip(self.record_ids.tolist(), self.labels.tolist(),
                                self.predictions, self.member.tolist()):
            yield AttackRecord(rid, y, v, m)

    @property
    def num_classes(self) -> int:
        return self.predictions.shape[1]

    def for_class(self, y: int) -> "AttackSet":
        idx = np.flatnonzero(self.labels == y)
        return AttackSet(self.record_ids[idx], self.labels[idx], self.predictions[idx],
                         self.member[idx], self.shadow[idx])

    @classmethod
    def from_records(cls, records: Sequence[AttackRecord]) -> "AttackSet":
        return cls(np.array([r.record_id for r in records]),
                   np.array([r.label for r in records], dtype=np.int64),
                   np.array([r.prediction for r in records], dtype=np.float64),
                   np.array([r.member for r in records], dtype=bool))

    def to_csv(self, path) -> None:
        """Write ``record_id,class,membership,p_0,...`` rows."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record_id", "class", "membership"]
                       + [f"p_{j}" for j in range(self.num_classes)])
            for r in self:
                w.writerow([r.record_id, r.label, r.membership]
                           + [repr(float(p)) for p in r.prediction])


def build_attack_training_set(ensemble: ShadowEnsemble) -> AttackSet:
    """Label each shadow's own train records IN and its test records OUT."""
    ids, labels, preds, member, owner = [], [], [], [], []
    for i, (model, d_in, d_out) in enumerate(
            zip(ensemble.models, ensemble.per_model_train, ensemble.per_model_test)):
        for data, tag in ((d_in, True), (d_out, False)):
            ids.append(data.ids)
            labels.append(data.y)
            preds.append(forward(model, data.X))
            member.append(np.full(len(data), tag))
            owner.append(np.full(len(data), i, dtype=np.int64))
    return AttackSet(np.concatenate(ids), np.concatenate(labels), np.concatenate(preds),
                     np.concatenate(member), np.concatenate(owner))
