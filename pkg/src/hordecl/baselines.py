"""Comparison methods: FT, FZ, EWC, MAS, LwF, FeTrIL and joint training.

All of them classify with one linear head over the seen classes (rows grow as
classes appear).  ``mask_ce`` freezes the head rows of classes absent from the
current task while the softmax still spans every seen class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datastream import LabeledDataset, StreamTask
from .harness import TrainProtocol, early_stop_loop
from .horde import HeadTrainable, HordeConfig, HordeMethod
from .nncore import (MlpNet, MlpSpec, ParamMatrix, backward, clip_grad_norm, cross_entropy_loss, forward,
                     linear_forward, per_sample_grad_stats, sgd_step, softmax, log_softmax)
from .prototypes import PrototypeStore, fetril_translate, update_prototypes

log = logging.getLogger(__name__)

BASE_METHODS = ("ft", "fz", "ewc", "mas", "lwf", "fetril", "joint", "horde_m", "horde_c")


# ---------------------------------------------------------------------------
# regularisers


@dataclass
class ImportanceState:
    omega: list[np.ndarray]
    anchor: list[np.ndarray]
    lam: float
    alpha: float = 0.1

    def __post_init__(self):
        if len(self.omega) != len(self.anchor):
            raise ValueError("importance and anchor lists differ in length")
        for o, a in zip(self.omega, self.anchor):
            if o.shape != a.shape:
                raise ValueError("importance and anchor shapes differ")
            if np.any(o < 0):
                raise ValueError("importance must be nonnegative")

    def consolidate(self, new_omega: list[np.ndarray], new_anchor: list[np.ndarray]) -> None:
        """Blend in a new importance estimate and move the anchor."""
        self.omega = [(1 - self.alpha) * n + self.alpha * o for n, o in zip(new_omega, self.omega)]
        self.anchor = [a.copy() for a in new_anchor]


def ewc_penalty(params: list[np.ndarray], state: ImportanceState) -> tuple[float, list[np.ndarray]]:
    """lam * sum(omega * (theta - anchor)**2) and its gradient."""
    if len(params) != len(state.anchor):
        raise ValueError("parameter list does not match the importance state")
    loss = 0.0
    grads = []
    for p, o, a in zip(params, state.omega, state.anchor):
        if p.shape != a.shape:
            raise ValueError(f"parameter shape {p.shape} does not match anchor {a.shape}")
        d = p - a
        loss += float(np.sum(o * d * d))
        grads.append(2.0 * state.lam * o * d)
    return state.lam * loss, grads


mas_penalty = ewc_penalty


def fisher_importance(net: MlpNet, inputs: np.ndarray, rows: np.ndarray,
                      chunk: int = 256) -> list[np.ndarray]:
    """Mean per-sample squared CE gradient, for every layer of ``net``."""
    acc = [np.zeros(p.shape) for p in net.layers]
    for s in range(0, len(inputs), chunk):
        trace = forward(net, inputs[s:s + chunk])
        probs = softmax(trace.output)
        probs[np.arange(len(probs)), rows[s:s + chunk]] -= 1.0
        for a, g in zip(acc, per_sample_grad_stats(net, trace, probs, "sq")):
            a += g
    return [a / len(inputs) for a in acc]


def mas_importance(net: MlpNet, inputs: np.ndarray, chunk: int = 256) -> list[np.ndarray]:
    """Mean per-sample |d ||f(x)||^2 / d theta| for every layer of ``net``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("MAS importance needs inputs")
    acc = [np.zeros(p.shape) for p in net.layers]
    for s in range(0, len(inputs), chunk):
        trace = forward(net, inputs[s:s + chunk])
        for a, g in zip(acc, per_sample_grad_stats(net, trace, 2.0 * trace.output, "abs")):
            a += g
    return [a / len(inputs) for a in acc]


def lwf_distill_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
                     tau: float = 2.0) -> tuple[float, np.ndarray]:
    """tau^2 * KL(teacher || student) on the teacher's columns, batch mean."""
    k = teacher_logits.shape[1]
    if k > student_logits.shape[1]:
        raise ValueError("teacher has more classes than the student")
    n = len(student_logits)
    grad = np.zeros_like(student_logits, dtype=np.float64)
    if k == 0:
        return 0.0, grad
    log_q = log_softmax(student_logits[:, :k] / tau)
    log_p = log_softmax(teacher_logits / tau)
    p = np.exp(log_p)
    loss = tau * tau * float(np.sum(p * (log_p - log_q)) / n)
    grad[:, :k] = tau * (np.exp(log_q) - p) / n
    return max(loss, 0.0), grad


def masked_cross_entropy(logits: np.ndarray, rows: np.ndarray, frozen_rows: set[int],
                         softmax_over: str = "current") -> tuple[float, np.ndarray]:
    """CE where frozen rows get no gradient.

    With ``softmax_over='current'`` the frozen rows also leave the softmax, so
    the summed bias gradient of the trained rows is zero and they cannot drift
    upward as a block.
    """
    if not frozen_rows or softmax_over == "seen":
        loss, dlog = cross_entropy_loss(logits, rows)
        if frozen_rows:
            dlog[:, sorted(frozen_rows)] = 0.0
        return loss, dlog
    if softmax_over != "current":
        raise ValueError(f"unknown softmax scope {softmax_over!r}")
    cols = np.array([i for i in range(logits.shape[1]) if i not in frozen_rows], dtype=np.int64)
    pos = np.full(logits.shape[1], -1)
    pos[cols] = np.arange(len(cols))
    loss, dsub = cross_entropy_loss(logits[:, cols], pos[rows])
    dlog = np.zeros_like(logits)
    dlog[:, cols] = dsub
    return loss, dlog


def apply_ce_mask(head: ParamMatrix, head_classes: list[int], current_classes, enabled: bool) -> None:
    """Freeze the head rows of classes absent from the current task."""
    current = set(int(c) for c in current_classes)
    head.frozen_rows = {i for i, c in enumerate(head_classes) if c not in current} if enabled else set()


# ---------------------------------------------------------------------------
# shared classifier


@dataclass
class BaselineConfig:
    hidden: tuple[int, ...] = (256, 256)
    embedding: int = 64
    protocol: TrainProtocol = field(default_factory=TrainProtocol)
    head_protocol: TrainProtocol = field(default_factory=lambda: TrainProtocol(base_lr=0.01))
    mask_ce: bool = False
    # "current": softmax over the current task's rows only; "seen": over every seen row
    mask_softmax: str = "current"
    ewc_lambda: float = 40000.0
    ewc_alpha: float = 0.1
    mas_lambda: float = 10.0
    mas_alpha: float = 0.1
    lwf_lambda: float = 30.0
    lwf_tau: float = 2.0


class _ClassifierTrainable:
    def __init__(self, method: "BaselineMethod", train, val, protocol: TrainProtocol):
        self.m = method
        self.protocol = protocol
        self.train = train
        self.val = val if val is not None and len(val[1]) else None

    def params(self) -> list[ParamMatrix]:
        return [p for p in self.m.full_net().layers if not p.frozen]

    def _loss(self, x, y, grad: bool) -> float:
        m = self.m
        net = m.full_net()
        trace = forward(net, x)
        loss, dlog = masked_cross_entropy(trace.output, m.rows(y), m.head.frozen_rows,
                                          m.cfg.mask_softmax)
        if m.teacher is not None:
            kd, dkd = lwf_distill_loss(trace.output, m.teacher(x), m.cfg.lwf_tau)
            loss += m.cfg.lwf_lambda * kd
            dlog = dlog + m.cfg.lwf_lambda * dkd
        if grad:
            backward(net, trace, dlog)
        if m.importance is not None:
            layers = m.net.layers
            pen, grads = ewc_penalty([p.values for p in layers], m.importance)
            loss += pen
            if grad:
                for p, g in zip(layers, grads):
                    if not p.frozen:
                        p.gradient += g
        return loss

    def train_epoch(self, lr, momentum, rng) -> None:
        x, y = self.train
        order = rng.permutation(len(y))
        bs = self.protocol.batch_size
        for s in range(0, len(y), bs):
            idx = order[s:s + bs]
            self._loss(x[idx], y[idx], grad=True)
            clip_grad_norm(self.params(), self.protocol.clip_norm)
            sgd_step(self.params(), lr, momentum)

    def val_loss(self) -> float | None:
        if self.val is None:
            return None
        return self._loss(*self.val, grad=False)

    def get_state(self):
        return [p.values.copy() for p in self.params()]

    def set_state(self, state) -> None:
        for p, v in zip(self.params(), state):
            p.assign(v.copy())
            p.reset_velocity()


class BaselineMethod:
    """Extractor + linear head trained end to end with an optional regulariser."""

    def __init__(self, kind: str, cfg: BaselineConfig, input_dim: int, seed: int = 0):
        if kind not in ("ft", "fz", "ewc", "mas", "lwf", "joint"):
            raise ValueError(f"unknown baseline {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.name = kind + ("_masked" if cfg.mask_ce else "")
        self.rng = np.random.default_rng([seed, 0xBA5E])
        spec = MlpSpec(input_dim, cfg.hidden, cfg.embedding)
        self.net = MlpNet.from_spec(spec, self.rng)
        self.head = ParamMatrix(np.zeros((0, cfg.embedding + 1)), "head")
        self.head_classes: list[int] = []
        self.importance: ImportanceState | None = None
        self.teacher = None
        self.tasks_done = 0
        self._joint_train: list[int] = []
        self._joint_val: list[int] = []

    def full_net(self) -> MlpNet:
        return MlpNet(self.net.layers + [self.head], self.net.activations + ["linear"])

    def rows(self, labels) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.head_classes)}
        return np.array([pos[int(c)] for c in labels], dtype=np.int64)

    def logits(self, inputs: np.ndarray):
        return self.full_net()(inputs), list(self.head_classes)

    def _grow_head(self, classes) -> None:
        new = [c for c in sorted(classes) if c not in self.head_classes]
        if new:
            w = self.head.values
            self.head.assign(np.vstack([w, np.zeros((len(new), w.shape[1]))]))
            self.head_classes.extend(new)

    def learn_task(self, task: StreamTask, dataset: LabeledDataset) -> dict:
        tr, va = task.train_indices(), task.val_indices()
        if self.kind == "joint":
            self._joint_train = sorted(set(self._joint_train) | set(tr.tolist()))
            self._joint_val = sorted(set(self._joint_val) | set(va.tolist()))
            tr, va = np.array(self._joint_train), np.array(self._joint_val, dtype=np.int64)
        x_tr, y_tr = dataset.inputs[tr], dataset.labels[tr]
        x_va, y_va = dataset.inputs[va], dataset.labels[va]

        if self.kind == "lwf" and self.head_classes:
            teacher = self.full_net().clone()
            teacher.freeze()
            self.teacher = teacher
        self._grow_head(set(y_tr.tolist()) | set(task.class_set))
        apply_ce_mask(self.head, self.head_classes, task.class_set, self.cfg.mask_ce)
        protocol = self.cfg.protocol
        if self.kind == "fz" and self.tasks_done > 0:
            protocol = self.cfg.head_protocol
        model = _ClassifierTrainable(self, (x_tr, y_tr), (x_va, y_va), protocol)
        early_stop_loop(model, protocol, self.rng)
        self.head.frozen_rows = set()

        if self.kind in ("ewc", "mas"):
            if self.kind == "ewc":
                omega = fisher_importance(self.full_net(), x_tr, self.rows(y_tr))
                lam, alpha = self.cfg.ewc_lambda, self.cfg.ewc_alpha
            else:
                omega = mas_importance(self.full_net(), x_tr)
                lam, alpha = self.cfg.mas_lambda, self.cfg.mas_alpha
            omega = omega[: len(self.net.layers)]
            anchor = [p.values.copy() for p in self.net.layers]
            if self.importance is None:
                self.importance = ImportanceState(omega, anchor, lam, alpha)
            else:
                self.importance.consolidate(omega, anchor)
        if self.kind == "fz" and self.tasks_done == 0:
            self.net.freeze()
        self.tasks_done += 1
        return {}


class FeTrILMethod:
    """Extractor frozen after the first task; head trained on mean-shifted features."""

    name = "fetril"

    def __init__(self, cfg: BaselineConfig, input_dim: int, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng([seed, 0xFE7])
        self.base = BaselineMethod("ft", BaselineConfig(cfg.hidden, cfg.embedding, cfg.protocol),
                                   input_dim, seed)
        self.net = self.base.net
        self.head = ParamMatrix(np.zeros((0, cfg.embedding + 1)), "head")
        self.head_classes: list[int] = []
        self.store = PrototypeStore()
        self.tasks_done = 0

    def logits(self, inputs: np.ndarray):
        return linear_forward(self.head, self.net(inputs)), list(self.head_classes)

    def learn_task(self, task: StreamTask, dataset: LabeledDataset) -> dict:
        tr, va = task.train_indices(), task.val_indices()
        if self.tasks_done == 0:
            self.base.learn_task(task, dataset)
            self.net.freeze()
        x_tr, y_tr = dataset.inputs[tr], dataset.labels[tr]
        f_tr = self.net(x_tr)
        f_va = self.net(dataset.inputs[va]) if len(va) else None
        y_va = dataset.labels[va]
        update_prototypes(self.store, 0, {c: f_tr[y_tr == c] for c in task.class_set})
        new = [c for c in sorted(task.class_set) if c not in self.head_classes]
        if new:
            w = self.head.values
            self.head.assign(np.vstack([w, np.zeros((len(new), w.shape[1]))]))
            self.head_classes.extend(new)
        absent = np.array([c for c in self.head_classes if c not in task.class_set
                           and self.store.known(c, 0)], dtype=np.int64)
        store = self.store

        def pseudo(x, y, rng):
            if len(absent) == 0:
                return None
            y = np.asarray(y)
            ok = np.array([store.known(int(c), 0) for c in y], dtype=bool)
            if not ok.any():
                return None
            target = absent[rng.integers(0, len(absent), size=int(ok.sum()))]
            src = np.stack([store.get(int(c), 0)[0] for c in y[ok]])
            dst = np.stack([store.get(int(c), 0)[0] for c in target])
            return fetril_translate(x[ok], src, dst), target

        row_of = {c: i for i, c in enumerate(self.head_classes)}
        trainable = HeadTrainable(self.head, row_of, (f_tr, y_tr),
                                  (f_va, y_va) if f_va is not None else None,
                                  self.cfg.head_protocol.batch_size,
                                  pseudo if len(absent) else None,
                                  val_seed=int(self.rng.integers(2 ** 31)),
                                  clip_norm=self.cfg.head_protocol.clip_norm)
        early_stop_loop(trainable, self.cfg.head_protocol, self.rng)
        self.tasks_done += 1
        return {}


def make_method(name: str, input_shape: tuple[int, int, int], seed: int = 0,
                baseline_cfg: BaselineConfig | None = None,
                horde_cfg: HordeConfig | None = None):
    """Build a method from its registry name, e.g. ``ft``, ``ewc_masked``, ``horde_m``."""
    masked = name.endswith("_masked")
    base = name[: -len("_masked")] if masked else name
    if base not in BASE_METHODS:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(BASE_METHODS)}")
    input_dim = int(np.prod(input_shape))
    if base.startswith("horde"):
        cfg = horde_cfg or HordeConfig()
        cfg = HordeConfig(**{**vars(cfg), "growth": base[-1]})
        return HordeMethod(cfg, input_shape, input_dim, seed)
    cfg = baseline_cfg or BaselineConfig()
    if masked:
        cfg = BaselineConfig(**{**vars(cfg), "mask_ce": True})
    if base == "fetril":
        return FeTrILMethod(cfg, input_dim, seed)
    return BaselineMethod(base, cfg, input_dim, seed)
