"""Non-learned retrieval baselines and the Bernoulli-policy ablation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from . import policy as pol
from . import specials
from .diffcore import Tensor
from .errors import UsageError

STRATEGY_KINDS = ("top_k", "long_context", "adaptive_k",
                  "ldar_checkpoint", "bernoulli_checkpoint")


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    k: Optional[int] = None
    path: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise UsageError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "top_k" and (self.k is None or self.k < 1):
            raise UsageError("top_k requires k >= 1")
        if self.kind.endswith("_checkpoint") and not self.path:
            raise UsageError(f"{self.kind} requires a checkpoint path")

    @property
    def label(self) -> str:
        if self.kind == "top_k":
            return f"top_{self.k}"
        if self.kind == "ldar_checkpoint":
            return "ldar"
        if self.kind == "bernoulli_checkpoint":
            return "bernoulli"
        return self.kind


def parse_strategy(text: str) -> StrategySpec:
    """Parse CLI syntax: top_k:5 | long_context | adaptive_k |
    ldar_checkpoint:PATH | bernoulli_checkpoint:PATH."""
    kind, _, arg = text.partition(":")
    kind = kind.strip()
    if kind == "top_k":
        try:
            spec = StrategySpec("top_k", k=int(arg))
        except ValueError:
            raise UsageError(f"top_k needs an integer argument, got {arg!r}") from None
    elif kind in ("long_context", "adaptive_k"):
        if arg:
            raise UsageError(f"{kind} takes no argument")
        spec = StrategySpec(kind)
    elif kind in ("ldar_checkpoint", "bernoulli_checkpoint"):
        spec = StrategySpec(kind, path=arg)
    else:
        raise UsageError(f"unknown strategy {text!r}")
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# fixed strategies


def top_k(scores: Sequence[float], k: int) -> List[int]:
    """Indices of the min(k, N) highest scores; ties go to lower indices."""
    if k < 1:
        raise UsageError("top_k requires k >= 1")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    return sorted(int(i) for i in order[:min(k, s.shape[0])])


def long_context(scores: Sequence[float]) -> List[int]:
    n = len(scores)
    if n < 1:
        raise UsageError("long_context requires at least one passage")
    return list(range(n))


def adaptive_k(scores: Sequence[float]) -> List[int]:
    """Everything above the largest gap in the descending-sorted scores.

    Ties on the gap go to the first (shallowest) cut.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if n < 1:
        raise UsageError("adaptive_k requires at least one passage")
    order = np.argsort(-s, kind="stable")
    if n == 1:
        return [int(order[0])]
    gaps = s[order[:-1]] - s[order[1:]]
    cut = int(np.argmax(gaps)) + 1
    return sorted(int(i) for i in order[:cut])


# ---------------------------------------------------------------------------
# Bernoulli ablation policy


def bernoulli_log_prob(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of per-token Bernoulli log-likelihoods, differentiable in logits.

    Uses log sigma(l) = -softplus(-l) and log(1 - sigma(l)) = -softplus(l).
    """
    m = np.asarray(mask, dtype=np.float64).reshape(logits.shape)
    picked = dc.mul(dc.softplus(dc.neg(logits)), Tensor(m))
    skipped = dc.mul(dc.softplus(logits), Tensor(1.0 - m))
    return dc.neg(dc.sum_all(dc.add(picked, skipped)))


class BernoulliPolicy:
    """Per-passage independent selection head on the shared encoder trunk.

    An empty sample is not a usable context: it is resampled once, then
    forced to the top-similarity passage.
    """

    kind = "bernoulli"

    def __init__(self, config: pol.PolicyConfig,
                 params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else pol.init_params(
            pol.bernoulli_param_shapes(config), seed)

    def token_logits(self, scores: Sequence[float]) -> Tuple[Tensor, np.ndarray]:
        """(N, 1) selection logits over rank order plus the argsort map."""
        s = np.asarray(scores, dtype=np.float64)
        if s.size == 0:
            raise UsageError("policy input must contain at least one score")
        order = np.argsort(s, kind="stable")
        tokens = pol.periodic_embed(self.params, s[order])
        encoded = pol.encode(self.params, self.config, tokens)
        logits = dc.linear(encoded, self.params["head.select.w"],
                           self.params["head.select.b"])
        return logits, order

    def rollout(self, scores: Sequence[float],
                rng: np.random.Generator) -> pol.RolloutResult:
        br = self.rollout_batch([scores], rng)
        return pol.RolloutResult(br.selections[0], br.log_prob_node, 0.0, 0.0)

    def rollout_batch(self, scores_list: Sequence[Sequence[float]],
                      rng: np.random.Generator) -> pol.BatchRollout:
        """Sample selections for equal-length instances in one forward."""
        if not scores_list:
            raise UsageError("policy input must contain at least one instance")
        lengths = {len(s) for s in scores_list}
        if len(lengths) != 1 or lengths == {0}:
            raise UsageError("batched forward requires equal non-zero lengths")
        n = lengths.pop()
        batch = len(scores_list)
        arrays = [np.asarray(s, dtype=np.float64) for s in scores_list]
        orders = [np.argsort(s, kind="stable") for s in arrays]
        stacked = np.concatenate([s[o] for s, o in zip(arrays, orders)])
        tokens = pol.periodic_embed(self.params, stacked)
        encoded = pol.encode(self.params, self.config, tokens, batch=batch)
        flat = dc.linear(encoded, self.params["head.select.w"],
                         self.params["head.select.b"])
        logits = dc.reshape(flat, (batch, n))
        probs = specials.sigmoid(logits.data)
        masks = np.empty((batch, n), dtype=bool)
        for i in range(batch):
            m = rng.random(n) < probs[i]
            if not m.any():
                m = rng.random(n) < probs[i]
            if not m.any():
                m[-1] = True  # highest-similarity rank
            masks[i] = m
        mf = masks.astype(np.float64)
        picked = dc.mul(dc.softplus(dc.neg(logits)), Tensor(mf))
        skipped = dc.mul(dc.softplus(logits), Tensor(1.0 - mf))
        node = dc.neg(dc.matmul(dc.add(picked, skipped), Tensor(np.ones((n, 1)))))
        selections = [sorted(int(i) for i in orders[b][masks[b]])
                      for b in range(batch)]
        return pol.BatchRollout(selections=selections, log_prob_node=node,
                                log_prob_values=node.data.ravel().copy(),
                                q_low=np.zeros(batch), q_up=np.zeros(batch))

    def deterministic_selection(self, scores: Sequence[float]) -> List[int]:
        """Mode of the product-Bernoulli: every passage with p > 0.5."""
        logits, order = self.token_logits(scores)
        mask = specials.sigmoid(logits.data).ravel() > 0.5
        if not mask.any():
            mask[-1] = True
        return sorted(int(i) for i in order[mask])

    def selection(self, scores: Sequence[float], rng: np.random.Generator,
                  greedy: bool = False) -> Tuple[List[int], None]:
        if greedy:
            return self.deterministic_selection(scores), None
        return self.rollout(scores, rng).selection, None


def bernoulli_forward(policy: BernoulliPolicy, scores: Sequence[float],
                      rng: np.random.Generator) -> Tuple[List[int], Tensor]:
    """(selection, differentiable log-probability) for one score vector."""
    out = policy.rollout(scores, rng)
    return out.selection, out.log_prob_node
