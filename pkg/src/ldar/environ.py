"""Retrieval instances and the synthetic distraction environment.

An instance is one retrieval problem: a similarity vector, per-passage
token counts, which passages are gold, and per-passage distraction
weights. The simulated answering model succeeds exactly when every gold
passage is selected and the summed distraction weight of the selection
stays within the model's capacity; the ``capacity_overload`` variant also
caps how many passages the model can digest at all. Because distractor
similarities overlap the gold band, no fixed score threshold separates
them, which is what makes fixed top-k selection fail and the banded
policy worth learning.

Default geometry: 52 passages of roughly 600 tokens each, mirroring a
top-1 token share of about 0.019 of a 32k context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, UsageError

REWARD_KINDS = ("capacity", "capacity_overload", "external")


@dataclass(frozen=True)
class RewardModel:
    kind: str = "capacity"
    capacity: float = 0.0
    overload_limit: int = 0
    flip_prob: float = 0.0

    def validate(self) -> None:
        if self.kind not in REWARD_KINDS:
            raise DataError(f"unknown reward kind {self.kind!r}")
        if self.capacity < 0.0:
            raise DataError("capacity must be non-negative")
        if not (0.0 <= self.flip_prob < 0.5):
            raise DataError("flip_prob must lie in [0, 0.5)")
        if self.kind == "capacity_overload" and self.overload_limit < 1:
            raise DataError("capacity_overload requires overload_limit >= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "capacity": self.capacity,
                "overload_limit": self.overload_limit, "flip_prob": self.flip_prob}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardModel":
        rm = cls(kind=d.get("kind", "capacity"),
                 capacity=float(d.get("capacity", 0.0)),
                 overload_limit=int(d.get("overload_limit", 0)),
                 flip_prob=float(d.get("flip_prob", 0.0)))
        rm.validate()
        return rm


@dataclass
class Instance:
    id: str
    scores: np.ndarray
    token_counts: np.ndarray
    gold: Tuple[int, ...]
    distractor_weights: np.ndarray
    reward_model: RewardModel

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])

    def validate(self) -> None:
        n = self.n
        if n < 1:
            raise DataError(f"instance {self.id}: needs at least one passage")
        if self.token_counts.shape != (n,) or self.distractor_weights.shape != (n,):
            raise DataError(f"instance {self.id}: field lengths disagree")
        if np.any(self.scores < -1.0 - 1e-9) or np.any(self.scores > 1.0 + 1e-9):
            raise DataError(f"instance {self.id}: scores outside [-1, 1]")
        if np.any(self.token_counts < 1):
            raise DataError(f"instance {self.id}: token counts must be positive")
        if np.any(self.distractor_weights < 0.0):
            raise DataError(f"instance {self.id}: negative distractor weight")
        if any(g < 0 or g >= n for g in self.gold):
            raise DataError(f"instance {self.id}: gold index out of range")
        self.reward_model.validate()


def cosine_scores(qvec: Sequence[float], pvecs: Sequence[Sequence[float]]) -> np.ndarray:
    """Cosine similarity of the query against each passage vector."""
    q = np.asarray(qvec, dtype=np.float64)
    p = np.asarray(pvecs, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 1 or p.shape[1] != q.shape[0]:
        raise UsageError("query and passage vectors must share one dimension")
    qn = np.linalg.norm(q)
    pn = np.linalg.norm(p, axis=1)
    if qn == 0.0 or np.any(pn == 0.0):
        raise ValueError("cosine_scores: zero-norm vector")
    return (p @ q) / (pn * qn)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    """Sampling ranges for one batch of synthetic instances.

    Count ranges are inclusive; similarity bands and the weight/capacity
    ranges are uniform reals; token counts are uniform integers.
    """

    n_instances: int = 200
    n_passages: int = 52
    gold_count: Tuple[int, int] = (1, 2)
    distractor_count: Tuple[int, int] = (6, 9)
    gold_band: Tuple[float, float] = (0.60, 0.90)
    distractor_band: Tuple[float, float] = (0.55, 0.85)
    background_band: Tuple[float, float] = (0.00, 0.50)
    weight_range: Tuple[float, float] = (0.5, 1.5)
    token_range: Tuple[int, int] = (400, 800)
    capacity_range: Tuple[float, float] = (4.0, 5.5)
    reward_kind: str = "capacity"
    overload_limit: int = 0
    flip_prob: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_instances < 1 or self.n_passages < 1:
            raise UsageError("generator needs positive instance/passage counts")
        if self.gold_count[0] < 1:
            raise UsageError("gold_count must be at least 1")
        if self.distractor_count[0] < 0:
            raise UsageError("distractor_count must be non-negative")
        for lo, hi in (self.gold_count, self.distractor_count, self.token_range):
            if lo > hi:
                raise UsageError("count range is inverted")
        for lo, hi in (self.gold_band, self.distractor_band, self.background_band,
                       self.weight_range, self.capacity_range):
            if lo > hi:
                raise UsageError("value range is inverted")
        if self.gold_count[1] + self.distractor_count[1] > self.n_passages:
            raise UsageError("gold + distractor counts exceed the passage pool")
        if self.token_range[0] < 1:
            raise UsageError("token counts must be positive")
        if self.reward_kind not in ("capacity", "capacity_overload"):
            raise UsageError(f"generator cannot emit reward kind {self.reward_kind!r}")
        if self.reward_kind == "capacity_overload" and self.overload_limit < 1:
            raise UsageError("capacity_overload requires overload_limit >= 1")

    def to_dict(self) -> dict:
        d = self.to_dict_typed()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_dict_typed(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def generate(cfg: GeneratorConfig, id_prefix: str = "i") -> List[Instance]:
    """Deterministic under (config, seed); same inputs give identical data."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    instances: List[Instance] = []
    n = cfg.n_passages
    for k in range(cfg.n_instances):
        g = int(rng.integers(cfg.gold_count[0], cfg.gold_count[1] + 1))
        m = int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))
        perm = rng.permutation(n)
        gold_idx = perm[:g]
        dist_idx = perm[g:g + m]
        scores = np.empty(n)
        scores[gold_idx] = rng.uniform(*cfg.gold_band, size=g)
        scores[dist_idx] = rng.uniform(*cfg.distractor_band, size=m)
        scores[perm[g + m:]] = rng.uniform(*cfg.background_band, size=n - g - m)
        weights = np.zeros(n)
        weights[dist_idx] = rng.uniform(*cfg.weight_range, size=m)
        tokens = rng.integers(cfg.token_range[0], cfg.token_range[1] + 1, size=n)
        capacity = float(rng.uniform(*cfg.capacity_range))
        inst = Instance(
            id=f"{id_prefix}{k:05d}",
            scores=scores,
            token_counts=tokens.astype(np.int64),
            gold=tuple(sorted(int(i) for i in gold_idx)),
            distractor_weights=weights,
            reward_model=RewardModel(kind=cfg.reward_kind, capacity=capacity,
                                     overload_limit=cfg.overload_limit,
                                     flip_prob=cfg.flip_prob),
        )
        inst.validate()
        instances.append(inst)
    return instances


# ---------------------------------------------------------------------------
# reward and usage accounting


def reward(inst: Instance, selection: Iterable[int],
           rng: Optional[np.random.Generator] = None, oracle=None) -> int:
    """0/1 answer-correctness signal for a selection of passage indices."""
    sel = sorted(set(int(i) for i in selection))
    if any(i < 0 or i >= inst.n for i in sel):
        raise UsageError(f"instance {inst.id}: selection index out of range")
    rm = inst.reward_model
    if rm.kind == "external":
        if oracle is None:
            raise UsageError("external reward kind requires an oracle client")
        return 1 if oracle.query(inst, sel) else 0
    got = set(sel)
    ok = all(gi in got for gi in inst.gold)
    if ok:
        ok = float(inst.distractor_weights[sel].sum()) <= rm.capacity
    if ok and rm.kind == "capacity_overload":
        ok = len(sel) <= rm.overload_limit
    r = 1 if ok else 0
    if rm.flip_prob > 0.0:
        if rng is None:
            raise UsageError("flip_prob > 0 requires an rng")
        if rng.random() < rm.flip_prob:
            r = 1 - r
    return r


def token_ratio(inst: Instance, selection: Iterable[int]) -> float:
    sel = sorted(set(int(i) for i in selection))
    if any(i < 0 or i >= inst.n for i in sel):
        raise UsageError(f"instance {inst.id}: selection index out of range")
    total = float(inst.token_counts.sum())
    return float(inst.token_counts[sel].sum()) / total


def passage_ratio(inst: Instance, selection: Iterable[int]) -> float:
    return len(set(int(i) for i in selection)) / inst.n


# ---------------------------------------------------------------------------
# presets used by the comparison study and the test suite


def default_config(seed: int = 0, n_instances: int = 200) -> GeneratorConfig:
    """The default capacity environment; exhibits the inverted-U sweep."""
    return GeneratorConfig(seed=seed, n_instances=n_instances)


def heterogeneous_config(seed: int = 0, n_instances: int = 600) -> GeneratorConfig:
    """Environment whose optimal band depth varies strongly per instance.

    Gold counts span 1..16 inside a high-similarity band sitting above the
    distractors, so the right depth tracks the visible size of the
    high-score cluster; capacity affords only a few distractors beyond it,
    which keeps every fixed cut and the full context failing on most
    instances.
    """
    return GeneratorConfig(
        n_instances=n_instances,
        gold_count=(1, 16),
        distractor_count=(8, 10),
        gold_band=(0.74, 0.95),
        distractor_band=(0.50, 0.74),
        background_band=(0.00, 0.45),
        weight_range=(0.45, 0.75),
        capacity_range=(2.6, 3.6),
        seed=seed,
    )


def heterogeneous_instances(n_instances: int = 500, seed: int = 0) -> List[Instance]:
    return generate(heterogeneous_config(seed=seed, n_instances=n_instances),
                    id_prefix="h")


def capacity_probe_config(capacity: float, seed: int = 0,
                          n_instances: int = 300) -> GeneratorConfig:
    """Environment whose only free knob is the answering model's capacity.

    Gold count varies and distractor weights are light, so affordable
    band depth scales directly with capacity.
    """
    return GeneratorConfig(
        n_instances=n_instances,
        gold_count=(1, 6),
        distractor_count=(10, 10),
        gold_band=(0.60, 0.90),
        distractor_band=(0.55, 0.85),
        weight_range=(0.10, 0.20),
        capacity_range=(capacity, capacity),
        seed=seed,
    )


def replace_id(inst: Instance, new_id: str) -> Instance:
    return Instance(id=new_id, scores=inst.scores, token_counts=inst.token_counts,
                    gold=inst.gold, distractor_weights=inst.distractor_weights,
                    reward_model=inst.reward_model)
