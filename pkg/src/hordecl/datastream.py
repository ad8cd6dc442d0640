"""Synthetic data and the three stream scenarios (CIL, EFCIR-U, EFCIR-B).

All generators are pure functions of their arguments and a seed.  Sample
indices always refer to rows of the full dataset; the held-out test rows are
fixed by the dataset seed and never enter a scenario.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("cil", "efcir_uniform", "efcir_beta")


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 20
    samples_per_class: int = 150
    input_shape: tuple[int, int, int] = (8, 8, 1)
    seed: int = 0
    test_frac: float = 0.2
    noise: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        h, w, c = self.input_shape
        if min(h, w, c, self.num_classes) <= 0:
            raise ValueError("dataset dimensions must be positive")
        if h != w:
            raise ValueError("images must be square for rotation self-supervision")
        if self.samples_per_class < 10:
            raise ValueError("need at least 10 samples per class")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "samples_per_class": self.samples_per_class,
                "input_shape": list(self.input_shape), "seed": self.seed,
                "test_frac": self.test_frac, "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(int(d["num_classes"]), int(d["samples_per_class"]), tuple(d["input_shape"]),
                   int(d["seed"]), float(d.get("test_frac", 0.2)), float(d.get("noise", 0.2)))


@dataclass
class LabeledDataset:
    """Rows of flattened images with integer labels and a fixed test split."""

    inputs: np.ndarray
    labels: np.ndarray
    input_shape: tuple[int, int, int]
    train_indices: np.ndarray
    test_indices: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def class_pools(self) -> dict[int, np.ndarray]:
        """Sorted train row indices per class."""
        tr = self.train_indices
        lab = self.labels[tr]
        return {int(c): np.sort(tr[lab == c]) for c in np.unique(lab)}


def split_train_test(labels: np.ndarray, test_frac: float, seed: int):
    """Per-class stratified split; returns sorted (train, test) row indices."""
    rng = np.random.default_rng([seed, 0x7E57])
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(test_frac * len(idx)))
        test.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def labels_only_dataset(labels: Sequence[int], test_frac: float = 0.0, seed: int = 0) -> LabeledDataset:
    """Dataset without pixel data, for scenario bookkeeping only."""
    labels = np.asarray(labels, dtype=np.int64)
    tr, te = split_train_test(labels, test_frac, seed)
    return LabeledDataset(np.zeros((len(labels), 0)), labels, (0, 0, 0), tr, te)


def _blob(h: int, cy: float, cx: float, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:h]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))


def gen_synthetic_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Image-like classes made of Gaussian-blob patterns.

    Every class owns two modes, each a signed sum of three blobs on the grid.
    A sample picks a mode, a random amplitude, a one-pixel cyclic shift and
    additive noise.  The mixture of modes and shifts defeats a linear model on
    raw pixels while staying easy for a small MLP.
    """
    h, _, ch = spec.input_shape
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    n = spec.samples_per_class
    modes = np.zeros((spec.num_classes, 2, h, h, ch))
    for c in range(spec.num_classes):
        for m in range(2):
            for _ in range(3):
                cy, cx = rng.uniform(0, h - 1, size=2)
                width = rng.uniform(0.6, 1.6)
                sign = rng.choice([-1.0, 1.0])
                chan = rng.uniform(0.3, 1.0, size=ch)
                modes[c, m] += sign * _blob(h, cy, cx, width)[:, :, None] * chan
    inputs = np.empty((spec.num_classes * n, h, h, ch))
    labels = np.repeat(np.arange(spec.num_classes), n)
    for c in range(spec.num_classes):
        which = rng.integers(0, 2, size=n)
        amp = rng.uniform(0.7, 1.3, size=n)
        shifts = rng.integers(-1, 2, size=(n, 2))
        for i in range(n):
            img = np.roll(modes[c, which[i]], shift=tuple(shifts[i]), axis=(0, 1))
            inputs[c * n + i] = amp[i] * img
    inputs += spec.noise * rng.standard_normal(inputs.shape)
    train, test = split_train_test(labels, spec.test_frac, spec.seed)
    return LabeledDataset(inputs.reshape(len(labels), -1), labels, spec.input_shape, train, test)


@dataclass
class StreamTask:
    task_index: int
    class_set: list[int]
    train_samples: dict[int, list[int]]
    val_samples: dict[int, list[int]] = field(default_factory=dict)

    def train_indices(self) -> np.ndarray:
        return np.array([i for c in self.class_set for i in self.train_samples[c]], dtype=np.int64)

    def val_indices(self) -> np.ndarray:
        return np.array([i for c in self.class_set for i in self.val_samples.get(c, [])],
                        dtype=np.int64)

    def num_train(self) -> int:
        return sum(len(v) for v in self.train_samples.values())


@dataclass
class Scenario:
    kind: str
    tasks: list[StreamTask]
    class_universe: list[int]
    seed: int
    repetition_probs: list[float] | None = None
    dataset: dict | None = None

    def seen_after(self, t: int) -> list[int]:
        seen: set[int] = set()
        for task in self.tasks[: t + 1]:
            seen.update(task.class_set)
        return sorted(seen)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed, "class_universe": list(self.class_universe)}
        if self.repetition_probs is not None:
            d["repetition_probs"] = [format(p, ".17g") for p in self.repetition_probs]
        if self.dataset is not None:
            d["dataset"] = self.dataset
        d["tasks"] = [
            {"index": t.task_index, "classes": list(t.class_set),
             "train": {str(c): list(map(int, t.train_samples[c])) for c in t.class_set},
             "val": {str(c): list(map(int, t.val_samples.get(c, []))) for c in t.class_set}}
            for t in self.tasks
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        tasks = [StreamTask(int(t["index"]), [int(c) for c in t["classes"]],
                            {int(c): [int(i) for i in v] for c, v in t["train"].items()},
                            {int(c): [int(i) for i in v] for c, v in t["val"].items()})
                 for t in d["tasks"]]
        probs = d.get("repetition_probs")
        return cls(d["kind"], tasks, [int(c) for c in d["class_universe"]], int(d["seed"]),
                   [float(p) for p in probs] if probs is not None else None, d.get("dataset"))


def manifest_text(scenario: Scenario) -> str:
    return json.dumps(scenario.to_dict(), separators=(",", ":"), sort_keys=False) + "\n"


def save_manifest(scenario: Scenario, path: str | Path) -> str:
    """Write the manifest and return its sha256."""
    text = manifest_text(scenario)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_manifest(path: str | Path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))


def manifest_hash(scenario: Scenario) -> str:
    return hashlib.sha256(manifest_text(scenario).encode()).hexdigest()


def _val_count(n: int, val_frac: float) -> int:
    if n < 2 or val_frac <= 0:
        return 0
    return max(1, int(np.floor(val_frac * n)))


def _split_val(rng: np.random.Generator, idx: np.ndarray, val_frac: float):
    idx = idx[rng.permutation(len(idx))]
    k = _val_count(len(idx), val_frac)
    return sorted(map(int, idx[k:])), sorted(map(int, idx[:k]))


def _make_task(rng, index: int, alloc: dict[int, np.ndarray], val_frac: float) -> StreamTask:
    classes = sorted(alloc)
    train, val = {}, {}
    for c in classes:
        train[c], val[c] = _split_val(rng, np.asarray(alloc[c]), val_frac)
    return StreamTask(index, classes, train, val)


def gen_cil(dataset: LabeledDataset, initial_classes: int, num_tasks: int,
            classes_per_task: int, val_frac: float = 0.1, seed: int = 0,
            class_order: str = "shuffled") -> Scenario:
    """Disjoint class-incremental stream: an initial block then equal-size tasks."""
    pools = dataset.class_pools()
    universe = sorted(pools)
    if initial_classes + num_tasks * classes_per_task != len(universe):
        raise ValueError(
            f"{initial_classes} + {num_tasks}x{classes_per_task} classes does not partition "
            f"{len(universe)} classes")
    rng = np.random.default_rng([seed, 0xC11])
    order = list(universe)
    if class_order == "shuffled":
        order = [universe[i] for i in rng.permutation(len(universe))]
    blocks = [order[:initial_classes]]
    for t in range(num_tasks):
        s = initial_classes + t * classes_per_task
        blocks.append(order[s:s + classes_per_task])
    tasks = [_make_task(rng, t, {c: pools[c] for c in blk}, val_frac) for t, blk in enumerate(blocks)]
    return Scenario("cil", tasks, universe, seed)


def sample_beta_probs(alpha: float, beta: float, num_classes: int, seed: int) -> np.ndarray:
    """I.i.d. Beta(alpha, beta) draws through the ratio of two Gamma variates."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("Beta parameters must be positive")
    rng = np.random.default_rng([seed, 0xBE7A])
    x = rng.standard_gamma(alpha, size=num_classes)
    y = rng.standard_gamma(beta, size=num_classes)
    p = x / (x + y)
    # keep strictly inside (0, 1) so the Bernoulli presence draw is never impossible
    return np.clip(p, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)


def _efcir_once(pools, universe, initial, num_inc_tasks, task_budget, probs,
                initial_data_frac, val_frac, rng) -> list[StreamTask]:
    unstreamed = {c: list(pools[c]) for c in universe}
    tasks = []
    alloc0 = {}
    for c in initial:
        pool = np.asarray(pools[c])
        k = int(round(initial_data_frac * len(pool)))
        pick = np.sort(rng.choice(pool, size=k, replace=False))
        alloc0[c] = pick
        picked = set(pick.tolist())
        unstreamed[c] = [i for i in unstreamed[c] if i not in picked]
    tasks.append(_make_task(rng, 0, alloc0, val_frac))

    for t in range(1, num_inc_tasks + 1):
        while True:
            present = rng.random(len(universe)) < probs
            if present.any():
                break
        classes = [universe[i] for i in np.flatnonzero(present)]
        k = len(classes)
        base, extra = divmod(task_budget, k)
        # the classes receiving the extra sample rotate with the rng
        bonus = set(rng.permutation(k)[:extra].tolist())
        alloc = {}
        for j, c in enumerate(classes):
            want = min(base + (1 if j in bonus else 0), len(pools[c]))
            fresh = unstreamed[c]
            if len(fresh) >= want:
                sel = rng.choice(len(fresh), size=want, replace=False)
                pick = [fresh[i] for i in sel]
            else:
                seen = sorted(set(pools[c].tolist()) - set(fresh))
                sel = rng.choice(len(seen), size=want - len(fresh), replace=False)
                pick = list(fresh) + [seen[i] for i in sel]
            picked = set(pick)
            unstreamed[c] = [i for i in fresh if i not in picked]
            alloc[c] = np.sort(np.asarray(pick, dtype=np.int64))
        tasks.append(_make_task(rng, t, alloc, val_frac))
    return tasks


def gen_efcir(dataset: LabeledDataset, initial_classes: int, num_inc_tasks: int,
              task_budget: int, probs: Sequence[float] | float, initial_data_frac: float = 0.5,
              val_frac: float = 0.1, seed: int = 0, kind: str = "efcir_uniform",
              max_attempts: int = 100) -> Scenario:
    """Repetition stream where each class shows up in a task with its own probability."""
    pools = dataset.class_pools()
    if not pools:
        raise ValueError("dataset has no training samples")
    universe = sorted(pools)
    probs = np.broadcast_to(np.asarray(probs, dtype=np.float64), (len(universe),)).copy()
    if np.any(probs <= 0) or np.any(probs > 1):
        raise ValueError("repetition probabilities must lie in (0, 1]")
    if initial_classes > len(universe):
        raise ValueError("more initial classes than classes in the dataset")
    if task_budget < 1:
        raise ValueError("task budget must be positive")
    rng = np.random.default_rng([seed, 0xEF])
    initial = sorted(universe[i] for i in rng.permutation(len(universe))[:initial_classes])
    for attempt in range(max_attempts):
        tasks = _efcir_once(pools, universe, initial, num_inc_tasks, task_budget, probs,
                            initial_data_frac, val_frac, rng)
        covered = set().union(*(t.class_set for t in tasks))
        if len(covered) == len(universe):
            break
        log.debug("efcir attempt %d left %d classes unseen, regenerating", attempt,
                  len(universe) - len(covered))
    else:
        log.warning("efcir stream does not cover every class after %d attempts", max_attempts)
    return Scenario(kind, tasks, universe, seed,
                    [float(p) for p in probs] if kind != "cil" else None)


def scenario_summary(scenario: Scenario, dataset: LabeledDataset | None = None) -> dict:
    inc = scenario.tasks[1:]
    counts = [len(t.class_set) for t in inc]
    streamed = set()
    for t in scenario.tasks:
        for c in t.class_set:
            streamed.update(t.train_samples[c])
            streamed.update(t.val_samples.get(c, []))
    out = {
        "kind": scenario.kind,
        "tasks": len(scenario.tasks),
        "mean_classes_per_task": float(np.mean(counts)) if counts else float(len(scenario.tasks[0].class_set)),
        "max_task_samples": max(len(t.train_indices()) + len(t.val_indices()) for t in scenario.tasks),
        "classes_covered": len(set().union(*(t.class_set for t in scenario.tasks))),
    }
    if dataset is not None:
        out["sample_coverage"] = len(streamed) / max(1, len(dataset.train_indices))
    if scenario.repetition_probs is not None:
        out["mean_repetition_prob"] = float(np.mean(scenario.repetition_probs))
    return out
