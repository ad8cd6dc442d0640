"""Self-reliant feature extractor training with rotation labels and two heads."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass

import numpy as np

from .nncore import (Batch, MlpNet, MlpSpec, ParamMatrix, backward, clip_grad_norm, contrastive_loss,
                     cross_entropy_loss, forward, glorot_uniform, linear_forward, sgd_step)
from .harness import TrainProtocol, early_stop_loop

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class SelfSupConfig:
    enabled: bool = True
    num_orientations: int = 4
    ce_head: bool = True
    ml_head: bool = True
    ml_margin: float = 1.0
    ml_dim: int = 32
    warm_start: bool = False

    def __post_init__(self):
        if not (self.ce_head or self.ml_head):
            raise ValueError("at least one training head must be enabled")
        if self.ml_margin <= 0:
            raise ValueError("ml_margin must be positive")
        if self.num_orientations != 4:
            raise ValueError("only the four 90-degree orientations are supported")


@dataclass
class FeatureExtractor:
    net: MlpNet
    spec: MlpSpec
    trained_classes: frozenset[int]
    birth_task: int
    uid: int = 0
    improvement_score: float = float("inf")

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim

    def embed(self, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
        if len(inputs) <= chunk:
            return self.net(inputs)
        return np.vstack([self.net(inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)])


def rotate_images(images: np.ndarray, k: int) -> np.ndarray:
    """Rotate a stack of (N, H, W, C) images by k quarter turns counter-clockwise."""
    return np.rot90(images, k=k, axes=(1, 2))


def rotate_batch(batch: Batch, input_shape: tuple[int, int, int],
                 num_orientations: int = 4) -> Batch:
    """Expand a batch with all rotations; the label becomes ``4 * y + k``."""
    h, w, c = input_shape
    if h != w:
        raise ValueError("rotation needs square images")
    imgs = batch.inputs.reshape(len(batch), h, w, c)
    xs, ys = [], []
    for k in range(num_orientations):
        xs.append(rotate_images(imgs, k).reshape(len(batch), -1))
        ys.append(batch.labels * num_orientations + k)
    return Batch(np.concatenate(xs), np.concatenate(ys))


class _FeTrainable:
    """Extractor plus its temporary CE and metric-learning heads."""

    def __init__(self, net, ce_head, ml_head, cfg, train, val, batch_size, clip_norm=None):
        self.net = net
        self.ce_head = ce_head
        self.ml_head = ml_head
        self.cfg = cfg
        self.train = train
        self.val = val
        self.batch_size = batch_size
        self.clip_norm = clip_norm

    def params(self) -> list[ParamMatrix]:
        ps = list(self.net.layers)
        if self.ce_head is not None:
            ps.append(self.ce_head)
        if self.ml_head is not None:
            ps.append(self.ml_head)
        return ps

    def _loss(self, x, y, grad: bool) -> float:
        trace = forward(self.net, x)
        emb = trace.output
        total = 0.0
        demb = np.zeros_like(emb)
        if self.ce_head is not None:
            logits = linear_forward(self.ce_head, emb)
            loss, dlog = cross_entropy_loss(logits, y)
            total += loss
            if grad:
                self.ce_head.gradient += dlog.T @ np.hstack([emb, np.ones((len(emb), 1))])
                demb += dlog @ self.ce_head.values[:, :-1]
        if self.ml_head is not None and len(np.unique(y)) >= 2:
            proj = linear_forward(self.ml_head, emb)
            loss, dproj = contrastive_loss(proj, y, self.cfg.ml_margin)
            total += loss
            if grad:
                self.ml_head.gradient += dproj.T @ np.hstack([emb, np.ones((len(emb), 1))])
                demb += dproj @ self.ml_head.values[:, :-1]
        if grad:
            backward(self.net, trace, demb)
        return total

    def train_epoch(self, lr, momentum, rng) -> None:
        x, y = self.train
        order = rng.permutation(len(y))
        for s in range(0, len(y), self.batch_size):
            idx = order[s:s + self.batch_size]
            if len(idx) < 2:
                continue
            self._loss(x[idx], y[idx], grad=True)
            clip_grad_norm(self.params(), self.clip_norm)
            sgd_step(self.params(), lr, momentum)

    def val_loss(self) -> float | None:
        if self.val is None:
            return None
        x, y = self.val
        losses = []
        for s in range(0, len(y), 512):
            losses.append(self._loss(x[s:s + 512], y[s:s + 512], grad=False) * len(y[s:s + 512]))
        return float(np.sum(losses) / len(y))

    def get_state(self):
        return [p.values.copy() for p in self.params()]

    def set_state(self, state) -> None:
        for p, v in zip(self.params(), state):
            p.assign(v.copy())
            p.reset_velocity()


def train_feature_extractor(inputs: np.ndarray, labels: np.ndarray, spec: MlpSpec,
                            cfg: SelfSupConfig, protocol: TrainProtocol,
                            input_shape: tuple[int, int, int], rng: np.random.Generator,
                            val_inputs: np.ndarray | None = None,
                            val_labels: np.ndarray | None = None, birth_task: int = 0,
                            uid: int = 0, init_from: MlpNet | None = None) -> FeatureExtractor:
    """Train one extractor on a task's data, drop the heads and freeze it."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot train a feature extractor on empty data")
    classes = sorted(set(labels.tolist()))
    remap = {c: i for i, c in enumerate(classes)}
    ml_head_on = cfg.ml_head
    if ml_head_on and len(classes) < 2:
        log.warning("single-class task: training the extractor with the CE head only")
        ml_head_on = False
        if not cfg.ce_head:
            raise ValueError("single-class data needs the CE head")

    def prep(x, y):
        y = np.array([remap[int(v)] for v in y], dtype=np.int64)
        b = Batch(x, y)
        if cfg.enabled:
            b = rotate_batch(b, input_shape, cfg.num_orientations)
        return b.inputs, b.labels

    train = prep(inputs, labels)
    val = prep(val_inputs, val_labels) if val_inputs is not None and len(val_inputs) else None

    net = init_from.clone() if (init_from is not None and cfg.warm_start) else MlpNet.from_spec(spec, rng)
    n_out = len(classes) * (cfg.num_orientations if cfg.enabled else 1)
    ce_head = ParamMatrix(glorot_uniform(spec.embedding_dim, n_out, rng), "ce_head") if cfg.ce_head else None
    ml_head = ParamMatrix(glorot_uniform(spec.embedding_dim, cfg.ml_dim, rng), "ml_head") if ml_head_on else None
    model = _FeTrainable(net, ce_head, ml_head, cfg, train, val, protocol.batch_size,
                         protocol.clip_norm)
    early_stop_loop(model, protocol, rng)
    net.freeze()
    return FeatureExtractor(net, spec, frozenset(classes), birth_task, uid)


def save_extractor(fe: FeatureExtractor) -> bytes:
    """Serialise an extractor to an ``.npz`` byte blob."""
    meta = {"version": CHECKPOINT_VERSION, "spec": fe.spec.to_dict(),
            "trained_classes": sorted(fe.trained_classes), "birth_task": fe.birth_task,
            "uid": fe.uid, "improvement_score": repr(fe.improvement_score),
            "activations": fe.net.activations}
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             params=fe.net.flat_params())
    return buf.getvalue()


def load_extractor(blob: bytes) -> FeatureExtractor:
    data = np.load(io.BytesIO(blob))
    meta = json.loads(data["meta"].tobytes().decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported extractor checkpoint version {meta['version']}")
    spec = MlpSpec.from_dict(meta["spec"])
    net = MlpNet.from_spec(spec, np.random.default_rng(0))
    net.activations = list(meta["activations"])
    net.load_flat(data["params"])
    net.freeze()
    return FeatureExtractor(net, spec, frozenset(meta["trained_classes"]), int(meta["birth_task"]),
                            int(meta["uid"]), float(meta["improvement_score"]))
