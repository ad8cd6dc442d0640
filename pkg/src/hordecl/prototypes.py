"""Per-extractor class statistics and pseudo-feature projection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
HEURISTICS = ("zeros", "random", "original_features")


@dataclass(frozen=True)
class EstimationHeuristic:
    kind: str = "original_features"
    random_scale: float = 40.0
    # substitute the estimate into the full projection instead of passing it through
    literal_projection: bool = False

    def __post_init__(self):
        if self.kind == "original":
            object.__setattr__(self, "kind", "original_features")
        if self.kind not in HEURISTICS:
            raise ValueError(f"unknown heuristic {self.kind!r}")
        if self.random_scale <= 0:
            raise ValueError("random_scale must be positive")


class PrototypeStore:
    """Mean/std per (class, extractor id); absent keys mean 'unknown'."""

    def __init__(self):
        self._stats: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def known(self, cls: int, extractor_id: int) -> bool:
        return (cls, extractor_id) in self._stats

    def get(self, cls: int, extractor_id: int):
        return self._stats[(cls, extractor_id)]

    def set(self, cls: int, extractor_id: int, mean: np.ndarray, std: np.ndarray) -> None:
        self._stats[(int(cls), int(extractor_id))] = (np.array(mean, dtype=np.float64),
                                                      np.maximum(np.array(std, dtype=np.float64), STD_FLOOR))

    def reset_extractor(self, extractor_id: int) -> None:
        for key in [k for k in self._stats if k[1] == extractor_id]:
            del self._stats[key]

    def classes(self) -> list[int]:
        return sorted({c for c, _ in self._stats})

    def items(self):
        return sorted(self._stats.items())

    def __len__(self) -> int:
        return len(self._stats)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrototypeStore) or self._stats.keys() != other._stats.keys():
            return False
        return all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                   for a, b in ((self._stats[k], other._stats[k]) for k in self._stats))

    def concatenated(self, cls: int, extractor_ids: Sequence[int]):
        """Concatenated (mean, std) in ensemble order; None if any segment is unknown."""
        if not all(self.known(cls, e) for e in extractor_ids):
            return None
        means, stds = zip(*(self.get(cls, e) for e in extractor_ids))
        return np.concatenate(means), np.concatenate(stds)

    def dump(self) -> str:
        """One line per (class, extractor) with the mean and std vectors."""
        lines = []
        for (c, e), (m, s) in self.items():
            lines.append(f"class={c} extractor={e} mean={' '.join(format(v, '.9g') for v in m)} "
                         f"std={' '.join(format(v, '.9g') for v in s)}")
        return "\n".join(lines) + ("\n" if lines else "")

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (c, e), (m, s) in self._stats.items():
            out[f"proto_{c}_{e}_mean"] = m
            out[f"proto_{c}_{e}_std"] = s
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "PrototypeStore":
        store = cls()
        for key in arrays:
            if key.startswith("proto_") and key.endswith("_mean"):
                _, c, e, _ = key.split("_")
                store._stats[(int(c), int(e))] = (np.array(arrays[key]),
                                                  np.array(arrays[key[:-5] + "_std"]))
        return store


def update_prototypes(store: PrototypeStore, extractor_id: int,
                      embeddings_by_class: Mapping[int, np.ndarray]) -> PrototypeStore:
    """Overwrite the statistics of every given class for one extractor."""
    for c, emb in embeddings_by_class.items():
        emb = np.asarray(emb, dtype=np.float64)
        if len(emb) < 2:
            log.warning("class %s has %d sample(s); prototype not updated", c, len(emb))
            continue
        store.set(c, extractor_id, emb.mean(0), emb.std(0))
    return store


def estimate_missing_mean(heuristic: EstimationHeuristic, feature_segment: np.ndarray,
                          dim: int, rng: np.random.Generator | None = None) -> np.ndarray:
    if len(feature_segment) != dim:
        raise ValueError("segment width does not match dim")
    if heuristic.kind == "zeros":
        return np.zeros(dim)
    if heuristic.kind == "random":
        if rng is None:
            raise ValueError("the random heuristic needs an rng")
        return heuristic.random_scale * rng.standard_normal(dim)
    return np.array(feature_segment, dtype=np.float64)


def project_pseudo_feature(feature: np.ndarray, source_class: int, target_class: int,
                           store: PrototypeStore, extractor_ids: Sequence[int],
                           dims: Sequence[int], heuristic: EstimationHeuristic,
                           rng: np.random.Generator | None = None) -> np.ndarray:
    """Move one concatenated feature from its class distribution to another's."""
    return project_batch(np.asarray(feature, dtype=np.float64)[None, :],
                         np.array([source_class]), np.array([target_class]), store,
                         extractor_ids, dims, heuristic, rng)[0]


def project_batch(features: np.ndarray, source: np.ndarray, target: np.ndarray,
                  store: PrototypeStore, extractor_ids: Sequence[int], dims: Sequence[int],
                  heuristic: EstimationHeuristic,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Row-wise projection; unknown target segments fall back to the heuristic."""
    features = np.asarray(features, dtype=np.float64)
    out = np.empty_like(features)
    offsets = np.concatenate([[0], np.cumsum(dims)])
    for e, lo, hi in zip(extractor_ids, offsets[:-1], offsets[1:]):
        seg = features[:, lo:hi]
        mu_y = np.empty_like(seg)
        sd_y = np.empty_like(seg)
        for c in np.unique(source):
            if not store.known(int(c), e):
                raise KeyError(f"no statistics for source class {c} on extractor {e}")
            m, s = store.get(int(c), e)
            rows = source == c
            mu_y[rows], sd_y[rows] = m, s
        res = np.empty_like(seg)
        for c in np.unique(target):
            rows = np.flatnonzero(target == c)
            if store.known(int(c), e):
                m, s = store.get(int(c), e)
                res[rows] = m + (seg[rows] - mu_y[rows]) / sd_y[rows] * s
            elif heuristic.kind == "original_features" and not heuristic.literal_projection:
                res[rows] = seg[rows]
            else:
                if heuristic.kind == "zeros":
                    mu_hat = np.zeros((len(rows), hi - lo))
                elif heuristic.kind == "random":
                    if rng is None:
                        raise ValueError("the random heuristic needs an rng")
                    mu_hat = heuristic.random_scale * rng.standard_normal((len(rows), hi - lo))
                else:
                    mu_hat = seg[rows]
                # unknown spread is fixed to one
                res[rows] = mu_hat + (seg[rows] - mu_y[rows]) / sd_y[rows]
        out[:, lo:hi] = res
    return out


def fetril_translate(features: np.ndarray, source_means: np.ndarray,
                     target_means: np.ndarray) -> np.ndarray:
    """Mean-shift translation of features onto another class."""
    return np.asarray(features) + np.asarray(target_means) - np.asarray(source_means)
