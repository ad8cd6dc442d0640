"""Ensemble of frozen extractors with a unified head trained on pseudo-features."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datastream import LabeledDataset, StreamTask
from .extractor import (FeatureExtractor, SelfSupConfig, load_extractor, save_extractor,
                        train_feature_extractor)
from .harness import TrainProtocol, early_stop_loop, task_error_rate
from .nncore import (MlpSpec, ParamMatrix, clip_grad_norm, cross_entropy_loss, linear_forward,
                     sgd_step)
from .prototypes import EstimationHeuristic, PrototypeStore, project_batch, update_prototypes

log = logging.getLogger(__name__)

ENSEMBLE_VERSION = 1


@dataclass
class GrowthDecision:
    action: str
    replaced_id: int | None = None
    reason: str = ""
    error_before: float | None = None

    def __post_init__(self):
        if self.action not in ("keep", "add", "replace"):
            raise ValueError(f"unknown growth action {self.action!r}")
        if (self.action == "replace") != (self.replaced_id is not None):
            raise ValueError("replaced_id is required for, and only for, replace")


class Ensemble:
    """Ordered frozen extractors plus one linear head over their concatenation."""

    def __init__(self, budget: int):
        if budget < 1:
            raise ValueError("budget must be at least 1")
        self.budget = budget
        self.extractors: list[FeatureExtractor] = []
        self.head = ParamMatrix(np.zeros((0, 1)), "unified_head")
        self.head_classes: list[int] = []
        self.next_uid = 0

    def __len__(self) -> int:
        return len(self.extractors)

    @property
    def ids(self) -> list[int]:
        return [fe.uid for fe in self.extractors]

    @property
    def dims(self) -> list[int]:
        return [fe.embedding_dim for fe in self.extractors]

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    def slot_of(self, uid: int) -> int:
        return self.ids.index(uid)

    def class_union(self) -> set[int]:
        return set().union(*(fe.trained_classes for fe in self.extractors)) if self.extractors else set()

    def features(self, inputs: np.ndarray) -> np.ndarray:
        if not self.extractors:
            return np.zeros((len(inputs), 0))
        return np.hstack([fe.embed(inputs) for fe in self.extractors])

    def logits(self, inputs: np.ndarray, feats: np.ndarray | None = None):
        feats = self.features(inputs) if feats is None else feats
        return linear_forward(self.head, feats), list(self.head_classes)

    def _column_span(self, slot: int) -> tuple[int, int]:
        lo = sum(self.dims[:slot])
        return lo, lo + self.dims[slot]

    def add(self, fe: FeatureExtractor) -> None:
        if len(self) >= self.budget:
            raise ValueError("ensemble budget exhausted")
        w = self.head.values
        cols = np.zeros((w.shape[0], fe.embedding_dim))
        self.head.assign(np.hstack([w[:, :-1], cols, w[:, -1:]]))
        self.extractors.append(fe)

    def replace(self, uid: int, fe: FeatureExtractor) -> None:
        """Swap one member; its head columns are rebuilt as zeros."""
        slot = self.slot_of(uid)
        lo, hi = self._column_span(slot)
        w = self.head.values
        cols = np.zeros((w.shape[0], fe.embedding_dim))
        self.head.assign(np.hstack([w[:, :lo], cols, w[:, hi:]]))
        self.extractors[slot] = fe

    def ensure_rows(self, classes: Sequence[int]) -> None:
        new = [c for c in sorted(classes) if c not in self.head_classes]
        if not new:
            return
        w = self.head.values
        self.head.assign(np.vstack([w, np.zeros((len(new), w.shape[1]))]))
        self.head_classes.extend(new)

    def new_uid(self) -> int:
        uid = self.next_uid
        self.next_uid += 1
        return uid


def decide_growth_m(ensemble: Ensemble, task_classes: Sequence[int]) -> GrowthDecision:
    """Grow or swap only when a new extractor enlarges the union of trained classes."""
    task = set(task_classes)
    union = ensemble.class_union()
    n = len(ensemble)
    if n < ensemble.budget:
        if task - union:
            return GrowthDecision("add", reason=f"union {len(union)}->{len(union | task)}")
        return GrowthDecision("keep", reason=f"task covered, union {len(union)}")
    best = None
    for fe in ensemble.extractors:
        others = [o.trained_classes for o in ensemble.extractors if o is not fe]
        rest = set().union(*others) if others else set()
        new_union = len(rest | task)
        unique = len(fe.trained_classes - rest)
        key = (-new_union, unique, fe.birth_task)
        if best is None or key < best[0]:
            best = (key, fe)
    (neg_union, unique, _), victim = best
    if -neg_union > len(union):
        return GrowthDecision("replace", victim.uid,
                              f"union {len(union)}->{-neg_union} replacing {victim.uid} ({unique} unique)")
    return GrowthDecision("keep", reason=f"no replacement enlarges union {len(union)}")


def decide_growth_c(ensemble: Ensemble, error_before: float | None,
                    tau_e: float = 0.4) -> GrowthDecision:
    """Grow when the pre-training error on the task exceeds ``tau_e``."""
    if not ensemble.extractors or error_before is None:
        return GrowthDecision("add", reason="bootstrap", error_before=1.0)
    if error_before <= tau_e:
        return GrowthDecision("keep", reason=f"e={error_before:.4f}<=tau", error_before=error_before)
    if len(ensemble) < ensemble.budget:
        return GrowthDecision("add", reason=f"e={error_before:.4f}>tau", error_before=error_before)
    victim = min(ensemble.extractors, key=lambda fe: (fe.improvement_score, fe.birth_task))
    return GrowthDecision("replace", victim.uid,
                          f"e={error_before:.4f}>tau replacing {victim.uid} "
                          f"(score {victim.improvement_score:.4f})", error_before)


class HeadTrainable:
    """Linear head on fixed features, trained on real plus projected samples.

    ``pseudo`` maps (features, labels, rng) to (pseudo_features, pseudo_labels),
    or returns None when no absent classes exist.
    """

    def __init__(self, head: ParamMatrix, row_of: dict[int, int], train, val, batch_size: int,
                 pseudo: Callable | None, val_seed: int = 0, clip_norm: float | None = None):
        self.head = head
        self.clip_norm = clip_norm
        self.row_of = row_of
        self.train = train
        self.batch_size = batch_size
        self.pseudo = pseudo
        self.val = None
        if val is not None and len(val[1]):
            vx, vy = val
            vp = pseudo(vx, vy, np.random.default_rng(val_seed)) if pseudo else None
            self.val = (vx, vy, vp)

    def _rows(self, labels) -> np.ndarray:
        return np.array([self.row_of[int(c)] for c in labels], dtype=np.int64)

    def _loss(self, x, y, pseudo, grad: bool) -> float:
        parts = [(x, y)]
        if pseudo is not None:
            parts.append(pseudo)
        total = 0.0
        for fx, fy in parts:
            logits = linear_forward(self.head, fx)
            loss, dlog = cross_entropy_loss(logits, self._rows(fy))
            total += loss
            if grad:
                self.head.gradient += dlog.T @ np.hstack([fx, np.ones((len(fx), 1))])
        return total

    def train_epoch(self, lr, momentum, rng) -> None:
        x, y = self.train
        order = rng.permutation(len(y))
        for s in range(0, len(y), self.batch_size):
            idx = order[s:s + self.batch_size]
            p = self.pseudo(x[idx], y[idx], rng) if self.pseudo else None
            self._loss(x[idx], y[idx], p, grad=True)
            clip_grad_norm([self.head], self.clip_norm)
            sgd_step([self.head], lr, momentum)

    def val_loss(self) -> float | None:
        if self.val is None:
            return None
        return self._loss(*self.val, grad=False)

    def get_state(self):
        return self.head.values.copy()

    def set_state(self, state) -> None:
        self.head.assign(state.copy())
        self.head.reset_velocity()


def make_projector(store: PrototypeStore, ensemble_ids: Sequence[int], dims: Sequence[int],
                   absent: Sequence[int], heuristic: EstimationHeuristic):
    absent = np.asarray(sorted(absent), dtype=np.int64)
    if len(absent) == 0:
        return None

    def pseudo(x, y, rng):
        y = np.asarray(y)
        target = absent[rng.integers(0, len(absent), size=len(y))]
        # classes too small for statistics cannot act as a source
        ok = np.array([all(store.known(int(c), e) for e in ensemble_ids) for c in y], dtype=bool)
        if not ok.any():
            return None
        return project_batch(x[ok], y[ok], target[ok], store, ensemble_ids, dims, heuristic, rng), target[ok]

    return pseudo


def train_unified_head(ensemble: Ensemble, train_feats: np.ndarray, train_labels: np.ndarray,
                       val_feats: np.ndarray | None, val_labels: np.ndarray | None,
                       store: PrototypeStore, heuristic: EstimationHeuristic,
                       protocol: TrainProtocol, rng: np.random.Generator,
                       seen_classes: Sequence[int]) -> float:
    """Train only the head; returns the post-training error rate on the task data."""
    task_classes = sorted(set(np.asarray(train_labels).tolist()))
    ensemble.ensure_rows(seen_classes)
    absent = [c for c in seen_classes if c not in task_classes]
    pseudo = make_projector(store, ensemble.ids, ensemble.dims, absent, heuristic)
    row_of = {c: i for i, c in enumerate(ensemble.head_classes)}
    val = (val_feats, val_labels) if val_feats is not None else None
    trainable = HeadTrainable(ensemble.head, row_of, (train_feats, train_labels), val,
                              protocol.batch_size, pseudo, val_seed=int(rng.integers(2 ** 31)),
                              clip_norm=protocol.clip_norm)
    early_stop_loop(trainable, protocol, rng)
    logits = linear_forward(ensemble.head, train_feats)
    return task_error_rate(logits, ensemble.head_classes, train_labels, task_classes)


@dataclass
class HordeConfig:
    growth: str = "m"
    budget: int = 10
    tau_e: float = 0.4
    full_hidden: tuple[int, ...] = (256, 256)
    full_embedding: int = 64
    slim_hidden: tuple[int, ...] = (80, 80)
    slim_embedding: int = 20
    selfsup: SelfSupConfig = field(default_factory=SelfSupConfig)
    heuristic: EstimationHeuristic = field(default_factory=EstimationHeuristic)
    fe_protocol: TrainProtocol = field(default_factory=lambda: TrainProtocol(base_lr=0.05))
    head_protocol: TrainProtocol = field(default_factory=lambda: TrainProtocol(base_lr=0.01))

    def __post_init__(self):
        if self.growth not in ("m", "c"):
            raise ValueError("growth heuristic must be 'm' or 'c'")


@dataclass
class DecisionLog:
    task: int
    action: str
    replaced_id: int | None
    new_id: int | None
    reason: str


class HordeMethod:
    """Step 1 (ensemble growth) and Step 2 (prototypes + head) for every task."""

    def __init__(self, cfg: HordeConfig, input_shape: tuple[int, int, int], input_dim: int,
                 seed: int = 0):
        self.cfg = cfg
        self.name = f"horde_{cfg.growth}"
        self.input_shape = tuple(input_shape)
        self.input_dim = input_dim
        self.rng = np.random.default_rng([seed, 0x40DE])
        self.ensemble = Ensemble(cfg.budget)
        self.store = PrototypeStore()
        self.seen: list[int] = []
        self.decisions: list[DecisionLog] = []
        self.union_history: list[int] = []

    def _spec(self) -> MlpSpec:
        if not self.ensemble.extractors and self.ensemble.next_uid == 0:
            return MlpSpec(self.input_dim, self.cfg.full_hidden, self.cfg.full_embedding)
        return MlpSpec(self.input_dim, self.cfg.slim_hidden, self.cfg.slim_embedding)

    def logits(self, inputs: np.ndarray):
        return self.ensemble.logits(inputs)

    def learn_task(self, task: StreamTask, dataset: LabeledDataset) -> dict:
        return run_horde_task(self, task, dataset)

    # checkpointing -----------------------------------------------------
    def checkpoint(self) -> bytes:
        ens = self.ensemble
        arrays = {f"fe_{i}": np.frombuffer(save_extractor(fe), dtype=np.uint8)
                  for i, fe in enumerate(ens.extractors)}
        arrays.update(self.store.to_arrays())
        arrays["head"] = ens.head.values
        meta = {"version": ENSEMBLE_VERSION, "budget": ens.budget, "head_classes": ens.head_classes,
                "next_uid": ens.next_uid, "seen": self.seen,
                "decisions": [vars(d) for d in self.decisions]}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    def restore(self, blob: bytes) -> None:
        data = np.load(io.BytesIO(blob))
        meta = json.loads(data["meta"].tobytes().decode())
        if meta["version"] != ENSEMBLE_VERSION:
            raise ValueError("unsupported ensemble checkpoint version")
        ens = Ensemble(meta["budget"])
        i = 0
        while f"fe_{i}" in data:
            ens.extractors.append(load_extractor(data[f"fe_{i}"].tobytes()))
            i += 1
        ens.head.assign(data["head"])
        ens.head_classes = list(meta["head_classes"])
        ens.next_uid = meta["next_uid"]
        self.ensemble = ens
        self.store = PrototypeStore.from_arrays({k: data[k] for k in data.files if k.startswith("proto_")})
        self.seen = list(meta["seen"])
        self.decisions = [DecisionLog(**d) for d in meta["decisions"]]


def run_horde_task(method: HordeMethod, task: StreamTask, dataset: LabeledDataset) -> dict:
    cfg = method.cfg
    ens = method.ensemble
    tr = task.train_indices()
    va = task.val_indices()
    x_tr, y_tr = dataset.inputs[tr], dataset.labels[tr]
    x_va, y_va = dataset.inputs[va], dataset.labels[va]

    # Step 1: growth decision
    if cfg.growth == "m":
        decision = decide_growth_m(ens, task.class_set)
    else:
        e_before = None
        if ens.extractors and ens.head_classes:
            logits, rows = ens.logits(x_tr)
            e_before = task_error_rate(logits, rows, y_tr, task.class_set)
        decision = decide_growth_c(ens, e_before, cfg.tau_e)

    new_fe = None
    if decision.action != "keep":
        spec = method._spec()
        warm = None
        if decision.action == "replace" and cfg.selfsup.warm_start:
            old = ens.extractors[ens.slot_of(decision.replaced_id)]
            if old.spec == spec:
                warm = old.net
        new_fe = train_feature_extractor(x_tr, y_tr, spec, cfg.selfsup, cfg.fe_protocol,
                                         method.input_shape, method.rng, x_va, y_va,
                                         birth_task=task.task_index, uid=ens.new_uid(),
                                         init_from=warm)
        if decision.action == "add":
            ens.add(new_fe)
        else:
            ens.replace(decision.replaced_id, new_fe)
            method.store.reset_extractor(decision.replaced_id)

    # Step 2: prototypes for current classes on every member, then the head
    method.seen = sorted(set(method.seen) | set(task.class_set))
    feats_tr = ens.features(x_tr)
    feats_va = ens.features(x_va) if len(va) else None
    offsets = np.concatenate([[0], np.cumsum(ens.dims)])
    for uid, lo, hi in zip(ens.ids, offsets[:-1], offsets[1:]):
        update_prototypes(method.store, uid,
                          {c: feats_tr[y_tr == c, lo:hi] for c in task.class_set})
    e_after = train_unified_head(ens, feats_tr, y_tr, feats_va, y_va if len(va) else None,
                                 method.store, cfg.heuristic, cfg.head_protocol, method.rng,
                                 method.seen)
    if new_fe is not None and cfg.growth == "c":
        new_fe.improvement_score = float(decision.error_before - e_after)

    method.decisions.append(DecisionLog(task.task_index, decision.action, decision.replaced_id,
                                        new_fe.uid if new_fe else None, decision.reason))
    method.union_history.append(len(ens.class_union()))
    return {"decision": decision.action, "ensemble_size": len(ens), "error_after": e_after}
