"""Membership inference adversaries.

Two families are built from shadow models:

* learned adversaries hold one binary classifier per class (a small DNN or a
  linear SVM) that maps a prediction vector to IN/OUT;
* entropy adversaries hold one threshold per class on the modified
  prediction entropy and answer IN when the entropy is at most the
  threshold.

The victim is only ever touched through :class:`BlackBox`, which exposes a
single ``query`` method.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .data import LabeledDataset
from .errors import (ParseError, RejectedInputError, RejectedPlanError,
                     ThresholdUndefinedError, UncoveredClassError, VersionError)
from .nn import (PROB_EPS, LayeredNet, TrainConfig, forward, init_net, load_params,
                 save_params, train)
from .seeding import derive_seed, rng
from .shadow import (AttackSet, Regime, ShadowEnsemble, ShadowPlan, build_attack_training_set,
                     sample_shadow_datasets, train_shadow_ensemble)
from .transfer import TransferMode, TransferPlan, split, transfer_train

logger = logging.getLogger(__name__)

# Largest value the clamped entropy can take (one-hot on a wrong class).
MPE_SATURATION = -2.0 * math.log(PROB_EPS)

# Threshold meaning "answer OUT for everything".
REJECT_ALL = -math.inf


class Membership(enum.Enum):
    IN = "in"
    OUT = "out"


class AttackKind(enum.Enum):
    DNN = "dnn"
    SVM = "svm"
    MPE = "mpe"


class BlackBox:
    """Query-only handle on a classifier."""

    __slots__ = ("_query",)

    def __init__(self, query: Callable[[np.ndarray], np.ndarray]):
        self._query = query

    @classmethod
    def from_net(cls, net: LayeredNet) -> "BlackBox":
        return cls(lambda X: forward(net, X))

    def query(self, X) -> np.ndarray:
        return np.asarray(self._query(np.asarray(X, dtype=np.float64)), dtype=np.float64)


# -- modified prediction entropy -------------------------------------------------

def modified_entropy_batch(V: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise modified prediction entropy, natural log, clamped logs.

    ``-(1 - v_y) log v_y - sum_{y' != y} v_y' log(1 - v_y')``; results lie
    in ``[0, MPE_SATURATION]``.
    """
    V = np.asarray(V, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(V.shape[0])
    vy = V[rows, y]
    correct = -(1.0 - vy) * np.log(np.maximum(vy, PROB_EPS))
    others = V.copy()
    others[rows, y] = 0.0
    wrong = -(others * np.log(np.maximum(1.0 - others, PROB_EPS))).sum(axis=1)
    return np.clip(correct + wrong, 0.0, MPE_SATURATION)


def modified_entropy(v, y: int) -> float:
    v = np.asarray(v, dtype=np.float64)
    if not 0 <= int(y) < v.shape[-1]:
        raise RejectedInputError(f"label {y} out of range for {v.shape[-1]} classes")
    return float(modified_entropy_batch(v[None, :], np.array([int(y)]))[0])


# -- thresholds --------------------------------------------------------------

def threshold_objective(me_in: np.ndarray, me_out: np.ndarray, tau: float) -> int:
    """Members at or below ``tau`` plus non-members above it."""
    return int(np.count_nonzero(me_in <= tau) + np.count_nonzero(me_out > tau))


def best_threshold(me_in, me_out) -> tuple[float, int]:
    """Maximize :func:`threshold_objective` over all real thresholds.

    The objective only changes at observed values, so the candidates are the
    distinct observed values plus :data:`REJECT_ALL`.  The smallest observed
    value that attains the maximum wins; ``REJECT_ALL`` is returned only when
    it beats every observed value.
    """
    me_in = np.sort(np.asarray(me_in, dtype=np.float64))
    me_out = np.sort(np.asarray(me_out, dtype=np.float64))
    if me_in.size + me_out.size == 0:
        raise ThresholdUndefinedError("no records to choose a threshold from")
    cands = np.unique(np.concatenate([me_in, me_out]))
    scores = (np.searchsorted(me_in, cands, side="right")
              + me_out.size - np.searchsorted(me_out, cands, side="right"))
    k = int(np.argmax(scores))
    best = int(scores[k])
    if me_out.size > best:
        return REJECT_ALL, int(me_out.size)
    return float(cands[k]), best


def _as_attack_set(source) -> AttackSet:
    if isinstance(source, ShadowEnsemble):
        return build_attack_training_set(source)
    return source


def select_thresholds(source, classes=None) -> dict[int, float]:
    """Per-class entropy thresholds from a shadow ensemble (or its attack set).

    Raises :class:`ThresholdUndefinedError` for a requested class that has no
    shadow record at all.
    """
    records = _as_attack_set(source)
    me = modified_entropy_batch(records.predictions, records.labels)
    classes = range(records.num_classes) if classes is None else classes
    taus = {}
    for y in classes:
        sel = records.labels == y
        if not sel.any():
            raise ThresholdUndefinedError(f"class {y} has no shadow records")
        taus[int(y)], _ = best_threshold(me[sel & records.member], me[sel & ~records.member])
    return taus


# -- per-class attack models -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class AttackNet:
    """Binary classifier on prediction vectors; output index 1 means IN."""

    net: LayeredNet

    def predict_member(self, V) -> np.ndarray:
        return np.argmax(forward(self.net, V), axis=1) == 1


@dataclass(frozen=True, eq=False)
class LinearSVM:
    weights: np.ndarray
    bias: float
    lam: float

    def decision(self, V) -> np.ndarray:
        return np.asarray(V, dtype=np.float64) @ self.weights + self.bias

    def predict_member(self, V) -> np.ndarray:
        return self.decision(V) > 0


@dataclass(frozen=True)
class ConstantModel:
    """Fallback for a class whose attack records all carry one tag."""

    member: bool

    def predict_member(self, V) -> np.ndarray:
        return np.full(np.asarray(V).shape[0], self.member)


DNN_HIDDEN = (50, 30, 5)
DNN_TRAIN = TrainConfig(epochs=50, batch_size=32, learning_rate=0.01, momentum=0.9)


@dataclass(frozen=True)
class AttackSettings:
    dnn_hidden: tuple[int, ...] = DNN_HIDDEN
    dnn_train: TrainConfig = DNN_TRAIN
    svm_lambda: float = 1e-3
    svm_epochs: int = 200
    svm_batch_size: int = 32


def train_attack_net(V, member, cfg: TrainConfig = DNN_TRAIN,
                     hidden=DNN_HIDDEN) -> AttackNet:
    V = np.asarray(V, dtype=np.float64)
    labels = np.asarray(member, dtype=np.int64)
    data = LabeledDataset(np.arange(len(labels)), V, labels, 2)
    net = init_net((V.shape[1], *hidden, 2), "relu", seed=derive_seed(cfg.seed, "attack-init"))
    return AttackNet(train(net, data, cfg))


def train_linear_svm(V, member, lam: float = 1e-3, epochs: int = 200,
                     batch_size: int = 32, seed: int = 0) -> LinearSVM:
    """Mini-batch Pegasos on the L2-regularized hinge loss.

    The bias is learned as the weight of a constant feature (so it is
    regularized too); step size at iteration ``t`` is ``1 / (lam * t)``.
    """
    X = np.asarray(V, dtype=np.float64)
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    s = np.where(np.asarray(member, dtype=bool), 1.0, -1.0)
    n = X.shape[0]
    w = np.zeros(X.shape[1])
    gen = rng(seed)
    batch = min(batch_size, n)
    t = 0
    for _ in range(epochs):
        order = gen.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            t += 1
            eta = 1.0 / (lam * t)
            margin = s[idx] * (X[idx] @ w)
            viol = margin < 1
            grad = lam * w - (s[idx][viol] @ X[idx][viol]) / len(idx)
            w = w - eta * grad
            radius = 1.0 / math.sqrt(lam)
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
    return LinearSVM(w[:-1].copy(), float(w[-1]), lam)


# -- adversaries ----------------------------------------------------------------

@dataclass(frozen=True)
class LearnedAdversary:
    models: Mapping[int, object]
    kind: AttackKind = AttackKind.DNN

    @property
    def classes(self) -> list[int]:
        return sorted(self.models)

    def decide(self, y: int, V) -> np.ndarray:
        try:
            model = self.models[int(y)]
        except KeyError:
            raise UncoveredClassError(f"adversary has no model for class {y}") from None
        return model.predict_member(np.atleast_2d(V))


@dataclass(frozen=True)
class EntropyAdversary:
    taus: Mapping[int, float]
    kind: AttackKind = field(default=AttackKind.MPE, init=False)

    @property
    def classes(self) -> list[int]:
        return sorted(self.taus)

    def decide(self, y: int, V) -> np.ndarray:
        try:
            tau = self.taus[int(y)]
        except KeyError:
            raise UncoveredClassError(f"adversary has no threshold for class {y}") from None
        V = np.atleast_2d(V)
        return modified_entropy_batch(V, np.full(V.shape[0], int(y))) <= tau


Adversary = LearnedAdversary | EntropyAdversary


def decide_all(adv: Adversary, labels, V) -> np.ndarray:
    """Membership decisions (True = IN) for many records at once."""
    labels = np.asarray(labels, dtype=np.int64)
    V = np.asarray(V, dtype=np.float64)
    out = np.zeros(labels.shape[0], dtype=bool)
    for y in np.unique(labels):
        sel = labels == y
        out[sel] = adv.decide(int(y), V[sel])
    return out


def infer(adv: Adversary, y: int, v) -> Membership:
    return Membership.IN if bool(adv.decide(y, np.asarray(v)[None, :])[0]) else Membership.OUT


def train_learned_adversary(records: AttackSet, kind: AttackKind,
                            settings: AttackSettings = AttackSettings(),
                            seed: int = 0, classes=None) -> LearnedAdversary:
    """One binary attack model per class, trained on that class's records only."""
    if kind is AttackKind.MPE:
        raise RejectedInputError("MPE adversaries are built with select_thresholds")
    classes = np.unique(records.labels) if classes is None else classes
    models = {}
    for y in classes:
        y = int(y)
        part = records.for_class(y)
        if len(part) == 0:
            raise RejectedInputError(f"no attack records for class {y}")
        n_in = int(part.member.sum())
        if n_in in (0, len(part)):
            logger.warning("class %d has only %s records; using a constant model",
                           y, "IN" if n_in else "OUT")
            models[y] = ConstantModel(bool(n_in))
            continue
        class_seed = derive_seed(seed, "attack", y)
        if kind is AttackKind.DNN:
            models[y] = train_attack_net(part.predictions, part.member,
                                         settings.dnn_train.with_seed(class_seed),
                                         settings.dnn_hidden)
        else:
            models[y] = train_linear_svm(part.predictions, part.member, settings.svm_lambda,
                                         settings.svm_epochs, settings.svm_batch_size,
                                         class_seed)
    return LearnedAdversary(models, kind)


def build_adversary(records: AttackSet, kind: AttackKind,
                    settings: AttackSettings = AttackSettings(), seed: int = 0) -> Adversary:
    if kind is AttackKind.MPE:
        return EntropyAdversary(select_thresholds(records, np.unique(records.labels)))
    return train_learned_adversary(records, kind, settings, seed)


# -- pipelines -------------------------------------------------------------------

def train_shadows_for(source: BlackBox, g_source: LayeredNet | None,
                      pools: tuple[LabeledDataset, LabeledDataset], plan: ShadowPlan,
                      regime: Regime | None = None, seed: int = 0,
                      workers: int = 1) -> ShadowEnsemble:
    """Sample and train the shadow ensemble used against ``source``.

    ``regime`` overrides ``plan.regime``; ``g_source`` is plugged into the
    shadows for the freezing and fine-tuning regimes and ignored for the
    baseline.  The victim is only queried to confirm its output arity.
    """
    regime = plan.regime if regime is None else regime
    shallow = None if regime is Regime.BASELINE else g_source
    if regime is not Regime.BASELINE and g_source is None:
        raise RejectedPlanError(f"regime {regime.value} needs the transferred shallow stack")
    plan = dataclasses.replace(plan, regime=regime, source_shallow=shallow)
    pool_train, pool_test = pools
    probe = source.query(pool_train.X[:1])
    if probe.shape[-1] != plan.shadow_dims[-1]:
        raise RejectedPlanError(
            f"victim emits {probe.shape[-1]} classes, shadows are built for {plan.shadow_dims[-1]}")
    sampled = sample_shadow_datasets(pool_train, pool_test, plan, derive_seed(seed, "sample"))
    return train_shadow_ensemble(plan, sampled, derive_seed(seed, "train"), workers)


def run_transmia(source: BlackBox, g_source: LayeredNet | None,
                 pools: tuple[LabeledDataset, LabeledDataset], plan: ShadowPlan,
                 kind: AttackKind, regime: Regime | None = None, seed: int = 0,
                 settings: AttackSettings = AttackSettings(),
                 workers: int = 1) -> tuple[Adversary, ShadowEnsemble]:
    """Shadow training (optionally transfer shadow training) plus attack fitting."""
    ensemble = train_shadows_for(source, g_source, pools, plan, regime, seed, workers)
    records = build_attack_training_set(ensemble)
    return build_adversary(records, kind, settings, derive_seed(seed, "attack")), ensemble


@dataclass(frozen=True)
class TargetAttackRun:
    adversary: LearnedAdversary
    shadow_sources: ShadowEnsemble
    shadow_targets: ShadowEnsemble


def run_blackbox_target_attack(target: BlackBox, target_train: LabeledDataset,
                               pools: tuple[LabeledDataset, LabeledDataset],
                               plan: ShadowPlan, mode: TransferMode,
                               target_head_dims: tuple[int, ...],
                               target_cfg: TrainConfig, seed: int = 0,
                               settings: AttackSettings = AttackSettings(),
                               workers: int = 1) -> TargetAttackRun:
    """Attack the source training set through a transferred target model.

    1. Train shadow source models on per-shadow draws from the shadow pool.
    2. Transfer each shadow source's shallow stack (all but the last layer)
       and train a shadow target model on the target training data, using
       the same transfer mode as the victim.
    3. Label shadow-target outputs on each shadow's train draw IN and on its
       test draw OUT (labels come from the source task).
    4. Fit one DNN per source class on target-task prediction vectors.
    """
    base_plan = dataclasses.replace(plan, regime=Regime.BASELINE, source_shallow=None)
    pool_train, pool_test = pools
    probe = target.query(pool_train.X[:1])
    if probe.shape[-1] != target_head_dims[-1]:
        raise RejectedPlanError(
            f"target emits {probe.shape[-1]} classes, shadow targets built for {target_head_dims[-1]}")
    sampled = sample_shadow_datasets(pool_train, pool_test, base_plan, derive_seed(seed, "sample"))
    sources = train_shadow_ensemble(base_plan, sampled, derive_seed(seed, "train"), workers)

    targets = []
    for i, src in enumerate(sources.models):
        g, _ = split(LayeredNet(src.layers, src.num_layers - 1))
        tplan = TransferPlan(g, target_head_dims, mode,
                             target_cfg.with_seed(derive_seed(seed, "target", i)),
                             plan.activation)
        targets.append(transfer_train(tplan, target_train))
    shadow_targets = ShadowEnsemble(tuple(targets), sources.per_model_train,
                                    sources.per_model_test)
    records = build_attack_training_set(shadow_targets)
    adv = train_learned_adversary(records, AttackKind.DNN, settings, derive_seed(seed, "attack"))
    return TargetAttackRun(adv, sources, shadow_targets)


# -- export ----------------------------------------------------------------------

ADV_MAGIC = b"TMAD"
ADV_VERSION = 1
_KIND_TAGS = {AttackKind.DNN: 0, AttackKind.SVM: 1, AttackKind.MPE: 2}
_MODEL_NET, _MODEL_SVM, _MODEL_CONST = 0, 1, 2


def save_adversary(adv: Adversary) -> bytes:
    """Little-endian blob: magic, version, kind tag, entry count, entries.

    Entropy adversaries store ``(class u32, tau f64)`` pairs.  Learned
    adversaries store ``(class u32, model tag u8, payload)`` where the payload
    is a length-prefixed net blob, an SVM (dim u32, weights, bias, lambda) or
    a constant model (member u8).
    """
    out = [struct.pack("<4sIBI", ADV_MAGIC, ADV_VERSION, _KIND_TAGS[adv.kind], len(adv.classes))]
    if isinstance(adv, EntropyAdversary):
        for y in adv.classes:
            out.append(struct.pack("<Id", y, adv.taus[y]))
        return b"".join(out)
    for y in adv.classes:
        model = adv.models[y]
        if isinstance(model, AttackNet):
            blob = save_params(model.net)
            out.append(struct.pack("<IBI", y, _MODEL_NET, len(blob)) + blob)
        elif isinstance(model, LinearSVM):
            out.append(struct.pack("<IBI", y, _MODEL_SVM, model.weights.size))
            out.append(model.weights.astype("<f8").tobytes())
            out.append(struct.pack("<dd", model.bias, model.lam))
        else:
            out.append(struct.pack("<IBB", y, _MODEL_CONST, int(model.member)))
    return b"".join(out)


def load_adversary(blob: bytes) -> Adversary:
    blob = bytes(blob)
    pos = 0

    def take(fmt_or_len, what):
        nonlocal pos
        n = struct.calcsize(fmt_or_len) if isinstance(fmt_or_len, str) else fmt_or_len
        if pos + n > len(blob):
            raise ParseError(f"adversary blob truncated while reading {what}")
        chunk = blob[pos:pos + n]
        pos += n
        return struct.unpack(fmt_or_len, chunk) if isinstance(fmt_or_len, str) else chunk

    magic, version, kind_tag, count = take("<4sIBI", "header")
    if magic != ADV_MAGIC:
        raise ParseError(f"bad adversary magic {magic!r}")
    if version != ADV_VERSION:
        raise VersionError(f"unsupported adversary version {version}")
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    if kind_tag not in kinds:
        raise ParseError(f"unknown attack kind tag {kind_tag}")
    kind = kinds[kind_tag]
    if kind is AttackKind.MPE:
        taus = {}
        for _ in range(count):
            y, tau = take("<Id", "threshold")
            taus[y] = tau
        adv = EntropyAdversary(taus)
    else:
        models = {}
        for _ in range(count):
            y, tag = take("<IB", "model header")
            if tag == _MODEL_NET:
                (size,) = take("<I", "net length")
                models[y] = AttackNet(load_params(take(size, "net blob")))
            elif tag == _MODEL_SVM:
                (dim,) = take("<I", "svm dim")
                w = np.frombuffer(take(8 * dim, "svm weights"), dtype="<f8").astype(np.float64)
                bias, lam = take("<dd", "svm bias")
                models[y] = LinearSVM(w, bias, lam)
            elif tag == _MODEL_CONST:
                (member,) = take("<B", "constant model")
                models[y] = ConstantModel(bool(member))
            else:
                raise ParseError(f"unknown model tag {tag} for class {y}")
        adv = LearnedAdversary(models, kind)
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes after adversary blob")
    return adv


def taus_to_csv(adv: EntropyAdversary) -> str:
    lines = ["class,tau"] + [f"{y},{adv.taus[y]!r}" for y in adv.classes]
    return "\n".join(lines) + "\n"
