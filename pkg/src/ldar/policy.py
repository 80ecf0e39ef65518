"""Adaptive banded retrieval policy.

Maps a variable-length similarity vector to two Beta distributions (lower
quantile and band width), samples a quantile band, scores its
log-probability on the tape, and converts quantiles to one-based sorted
passage indices.

The network: each score is embedded with learned periodic (sin/cos)
features, projected and layer-normalized, run through a pre-norm
bidirectional self-attention encoder (no positional encodings, no
masking), attention-pooled into a summary vector, and fed to four linear
heads whose softplus outputs parameterize Beta(alpha_low, beta_low) for
the lower quantile and Beta(alpha_width, beta_width) for the width. The
encoder is permutation-equivariant and the pooling invariant, so the
distribution parameters depend only on the multiset of scores; scores are
nevertheless presented in ascending sorted order (the same order used for
selection) to keep logs readable.

The width reparameterization q_up = q_low + (1 - q_low) * q_width keeps
q_up inside [q_low, 1] without clipping, so the log-density stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from . import specials
from .diffcore import DomainError, Tensor
from .errors import UsageError

LN_EPS = 1e-5
_TWO_PI = 2.0 * math.pi

_BAND_HEADS = ("alpha_low", "beta_low", "alpha_width", "beta_width")


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 256
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: Optional[int] = None  # None -> 4 * d_model
    n_frequencies: int = 48
    param_floor: float = 1e-4
    sample_clamp: float = 1e-6

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.d_model

    def validate(self) -> None:
        if self.d_model < 1 or self.n_layers < 0 or self.n_heads < 1:
            raise UsageError("policy dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise UsageError("d_model must be divisible by n_heads")
        if self.n_frequencies < 1:
            raise UsageError("n_frequencies must be positive")
        if self.param_floor <= 0.0:
            raise UsageError("param_floor must be positive")
        if not (0.0 < self.sample_clamp < 0.5):
            raise UsageError("sample_clamp must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "n_frequencies": self.n_frequencies,
            "param_floor": self.param_floor,
            "sample_clamp": self.sample_clamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class BandParams:
    """The four Beta parameters, as scalar tensors on the caller's tape."""

    alpha_low: Tensor
    beta_low: Tensor
    alpha_width: Tensor
    beta_width: Tensor

    def floats(self) -> Tuple[float, float, float, float]:
        return (self.alpha_low.item(), self.beta_low.item(),
                self.alpha_width.item(), self.beta_width.item())


@dataclass(frozen=True)
class BandAction:
    q_low: float
    q_width: float
    q_up: float
    log_prob: float


@dataclass
class RolloutResult:
    selection: List[int]
    log_prob_node: Tensor
    q_low: float
    q_up: float


@dataclass
class BatchRollout:
    """One sampled action per instance, log-probs stacked into one node."""

    selections: List[List[int]]
    log_prob_node: Tensor  # (B, 1)
    log_prob_values: np.ndarray
    q_low: np.ndarray
    q_up: np.ndarray


# ---------------------------------------------------------------------------
# parameter shapes and initialization


def trunk_param_shapes(cfg: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    d, f = cfg.d_model, cfg.n_frequencies
    shapes: Dict[str, Tuple[int, ...]] = {
        "periodic.freq": (f,),
        "embed.linear.w": (2 * f, d),
        "embed.linear.b": (d,),
        "embed.ln.gain": (d,),
        "embed.ln.bias": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"enc{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{nm}"] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{nm}"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, cfg.ffn_width)
        shapes[f"{p}.ffn.b1"] = (cfg.ffn_width,)
        shapes[f"{p}.ffn.w2"] = (cfg.ffn_width, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["pool.score.w"] = (d, 1)
    shapes["pool.score.b"] = (1,)
    shapes["pool.mlp.w"] = (d, d)
    shapes["pool.mlp.b"] = (d,)
    return shapes


def band_param_shapes(cfg: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = trunk_param_shapes(cfg)
    for nm in _BAND_HEADS:
        shapes[f"head.{nm}.w"] = (cfg.d_model, 1)
        shapes[f"head.{nm}.b"] = (1,)
    return shapes


def bernoulli_param_shapes(cfg: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = trunk_param_shapes(cfg)
    shapes["head.select.w"] = (cfg.d_model, 1)
    shapes["head.select.b"] = (1,)
    return shapes


def init_params(shapes: Dict[str, Tuple[int, ...]], seed: int) -> Dict[str, Tensor]:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, unit layer-norm gains.

    Frequencies are standard normal; the four band-head biases start at
    softplus^-1(1) so the initial policy is approximately Beta(1, 1).
    """
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "periodic.freq":
            data = rng.standard_normal(shape)
        elif leaf.startswith("w"):
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif leaf == "gain":
            data = np.ones(shape)
        elif name.startswith("head.") and leaf == "b" and not name.startswith("head.select"):
            data = np.full(shape, specials.SOFTPLUS_INV_ONE)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# network forward


_linear = dc.linear


def periodic_features(params: Dict[str, Tensor], scores: Sequence[float]) -> Tensor:
    """Raw sin/cos feature block, one row per score, before the projection."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1, 1)
    if s.size == 0:
        raise UsageError("periodic_features requires at least one score")
    freq = params["periodic.freq"]
    row = dc.reshape(freq, (1, freq.shape[0]))
    ang = dc.scale(dc.matmul(Tensor(s), row), _TWO_PI)
    return dc.concat_cols([dc.sin(ang), dc.cos(ang)])


def periodic_embed(params: Dict[str, Tensor], scores: Sequence[float]) -> Tensor:
    feats = periodic_features(params, scores)
    h = _linear(feats, params["embed.linear.w"], params["embed.linear.b"])
    return dc.layer_norm(h, params["embed.ln.gain"], params["embed.ln.bias"], LN_EPS)


def encode(params: Dict[str, Tensor], cfg: PolicyConfig, tokens: Tensor,
           batch: int = 1) -> Tensor:
    """Pre-norm bidirectional self-attention blocks; shape-preserving.

    With batch > 1, rows split into equal-length blocks of independent
    instances that never attend across block boundaries.
    """
    h = tokens
    for i in range(cfg.n_layers):
        p = f"enc{i}"
        a = dc.layer_norm(h, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], LN_EPS)
        q = _linear(a, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = _linear(a, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
        v = _linear(a, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        mixed = dc.attention_heads(q, k, v, cfg.n_heads, batch=batch)
        o = _linear(mixed, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
        h = dc.add(h, o)
        a2 = dc.layer_norm(h, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], LN_EPS)
        f1 = dc.gelu(_linear(a2, params[f"{p}.ffn.w1"], params[f"{p}.ffn.b1"]))
        h = dc.add(h, _linear(f1, params[f"{p}.ffn.w2"], params[f"{p}.ffn.b2"]))
    return h


def attn_pool(params: Dict[str, Tensor], encoded: Tensor, batch: int = 1) -> Tensor:
    """Softmax-weighted sum over each instance's tokens, then the pooled
    projection. (batch, d)."""
    scores = _linear(encoded, params["pool.score.w"], params["pool.score.b"])
    n = encoded.shape[0] // batch
    weights = dc.softmax_rows(dc.reshape(scores, (batch, n)))
    z = dc.pool_rows(weights, encoded)
    return dc.gelu(_linear(z, params["pool.mlp.w"], params["pool.mlp.b"]))


def beta_heads(params: Dict[str, Tensor], cfg: PolicyConfig, pooled: Tensor) -> BandParams:
    floor = Tensor(np.float64(cfg.param_floor))
    vals = {}
    for nm in _BAND_HEADS:
        raw = _linear(pooled, params[f"head.{nm}.w"], params[f"head.{nm}.b"])
        vals[nm] = dc.add(dc.softplus(raw), floor)
    return BandParams(**vals)


# ---------------------------------------------------------------------------
# Beta sampling (Marsaglia-Tsang) and log-density


def gamma_sample(rng: np.random.Generator, alpha: float, n: int = 1) -> np.ndarray:
    """n Gamma(alpha, 1) variates via Marsaglia-Tsang squeeze-and-accept.

    Shapes below 1 use the boost Gamma(alpha) = Gamma(alpha + 1) * U^(1/alpha).
    """
    if alpha <= 0.0:
        raise DomainError("gamma_sample requires alpha > 0")
    boosted = alpha < 1.0
    a = alpha + 1.0 if boosted else alpha
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        todo = n - filled
        x = rng.standard_normal(todo)
        v = (1.0 + c * x) ** 3
        u = rng.random(todo)
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.log(np.where(v > 0.0, v, 1.0))
            accept = (v > 0.0) & (
                (u < 1.0 - 0.0331 * x ** 4)
                | (np.log(u) < 0.5 * x * x + d * (1.0 - v + logv))
            )
        good = d * v[accept]
        take = min(good.size, todo)
        out[filled:filled + take] = good[:take]
        filled += take
    if boosted:
        out = out * rng.random(n) ** (1.0 / alpha)
    return out


def beta_sample(rng: np.random.Generator, alpha: float, beta: float, n: int = 1) -> np.ndarray:
    """n Beta(alpha, beta) variates as a ratio of two Gamma draws."""
    g1 = np.maximum(gamma_sample(rng, alpha, n), 1e-300)
    g2 = np.maximum(gamma_sample(rng, beta, n), 1e-300)
    return g1 / (g1 + g2)


def beta_log_pdf(alpha: float, beta: float, x: float) -> float:
    """Plain-float Beta log-density; no tape involvement."""
    if not (0.0 < x < 1.0):
        raise DomainError("beta_log_pdf requires x in the open interval (0, 1)")
    if alpha <= 0.0 or beta <= 0.0:
        raise DomainError("beta_log_pdf requires positive shape parameters")
    log_b = float(specials.lgamma(alpha) + specials.lgamma(beta)
                  - specials.lgamma(alpha + beta))
    return (alpha - 1.0) * math.log(x) + (beta - 1.0) * math.log1p(-x) - log_b


def band_log_prob(p: BandParams, action: BandAction) -> Tensor:
    """Joint log-density of (q_low, q_width); differentiable in the four heads."""
    low = dc.beta_log_density(p.alpha_low, p.beta_low, action.q_low)
    width = dc.beta_log_density(p.alpha_width, p.beta_width, action.q_width)
    return dc.add(low, width)


def band_log_prob_value(alpha_low: float, beta_low: float,
                        alpha_width: float, beta_width: float,
                        q_low: float, q_width: float) -> float:
    return (beta_log_pdf(alpha_low, beta_low, q_low)
            + beta_log_pdf(alpha_width, beta_width, q_width))


def sample_band(p: BandParams, rng: np.random.Generator,
                sample_clamp: float = 1e-6) -> BandAction:
    a_lo, b_lo, a_w, b_w = p.floats()
    q_low = float(np.clip(beta_sample(rng, a_lo, b_lo)[0],
                          sample_clamp, 1.0 - sample_clamp))
    q_width = float(np.clip(beta_sample(rng, a_w, b_w)[0],
                            sample_clamp, 1.0 - sample_clamp))
    q_up = q_low + (1.0 - q_low) * q_width
    lp = band_log_prob_value(a_lo, b_lo, a_w, b_w, q_low, q_width)
    return BandAction(q_low, q_width, q_up, lp)


# ---------------------------------------------------------------------------
# quantile-to-index mapping and band selection


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def quantiles_to_indices(n: int, q_low: float, q_up: float) -> Tuple[int, int]:
    """One-based (lower, upper) sorted positions of the quantile band."""
    if n < 1:
        raise UsageError("quantiles_to_indices requires n >= 1")
    if not (0.0 <= q_low <= q_up <= 1.0):
        raise UsageError("quantiles must satisfy 0 <= q_low <= q_up <= 1")
    lo = max(1, _round_half_away(n * q_low))
    hi = max(lo, _round_half_away(n * q_up))
    return min(lo, n), min(hi, n)


def select(scores: Sequence[float], lo: int, hi: int) -> List[int]:
    """Original indices at ascending-sorted positions lo..hi (one-based).

    Ties sort by lower original index first (stable).
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if not (1 <= lo <= hi <= n):
        raise UsageError(f"band [{lo}, {hi}] out of range for {n} passages")
    order = np.argsort(s, kind="stable")
    return sorted(int(i) for i in order[lo - 1:hi])


def band_select(scores: Sequence[float], action: BandAction) -> List[int]:
    lo, hi = quantiles_to_indices(len(scores), action.q_low, action.q_up)
    return select(scores, lo, hi)


# ---------------------------------------------------------------------------
# policy object


class BandPolicy:
    """Parameter bundle plus the forward/sample/select pipeline."""

    kind = "band"

    def __init__(self, config: PolicyConfig,
                 params: Optional[Dict[str, Tensor]] = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(
            band_param_shapes(config), seed)

    def band_params(self, scores: Sequence[float]) -> BandParams:
        """Distribution parameters for one score vector.

        Records on the active tape when one is open; otherwise a pure
        forward pass. Scores are presented in ascending sorted order.
        """
        return self.band_params_batch([scores])

    def band_params_batch(self, scores_list: Sequence[Sequence[float]]) -> BandParams:
        """Stacked forward pass; all instances must share one length.

        Returns BandParams whose tensors hold one row per instance.
        """
        if not scores_list:
            raise UsageError("policy input must contain at least one instance")
        lengths = {len(s) for s in scores_list}
        if lengths == {0}:
            raise UsageError("policy input must contain at least one score")
        if len(lengths) != 1:
            raise UsageError("batched forward requires equal-length score vectors")
        stacked = np.concatenate(
            [np.sort(np.asarray(s, dtype=np.float64)) for s in scores_list])
        batch = len(scores_list)
        tokens = periodic_embed(self.params, stacked)
        encoded = encode(self.params, self.config, tokens, batch=batch)
        pooled = attn_pool(self.params, encoded, batch=batch)
        return beta_heads(self.params, self.config, pooled)

    def act(self, scores: Sequence[float], rng: np.random.Generator) -> BandAction:
        return sample_band(self.band_params(scores), rng, self.config.sample_clamp)

    def greedy_action(self, scores: Sequence[float]) -> BandAction:
        """Deterministic action at the Beta means, for diagnostics."""
        a_lo, b_lo, a_w, b_w = self.band_params(scores).floats()
        clamp = self.config.sample_clamp
        q_low = float(np.clip(a_lo / (a_lo + b_lo), clamp, 1.0 - clamp))
        q_width = float(np.clip(a_w / (a_w + b_w), clamp, 1.0 - clamp))
        q_up = q_low + (1.0 - q_low) * q_width
        lp = band_log_prob_value(a_lo, b_lo, a_w, b_w, q_low, q_width)
        return BandAction(q_low, q_width, q_up, lp)

    def rollout(self, scores: Sequence[float], rng: np.random.Generator) -> RolloutResult:
        """Sample an action and build its log-prob node on the active tape."""
        br = self.rollout_batch([scores], rng)
        return RolloutResult(br.selections[0], br.log_prob_node,
                             float(br.q_low[0]), float(br.q_up[0]))

    def rollout_batch(self, scores_list: Sequence[Sequence[float]],
                      rng: np.random.Generator) -> BatchRollout:
        """Sample one action per instance through a single stacked forward."""
        p = self.band_params_batch(scores_list)
        clamp = self.config.sample_clamp
        a_lo = p.alpha_low.data.ravel()
        b_lo = p.beta_low.data.ravel()
        a_w = p.alpha_width.data.ravel()
        b_w = p.beta_width.data.ravel()
        batch = a_lo.shape[0]
        q_low = np.empty(batch)
        q_width = np.empty(batch)
        for i in range(batch):
            q_low[i] = np.clip(beta_sample(rng, a_lo[i], b_lo[i])[0],
                               clamp, 1.0 - clamp)
            q_width[i] = np.clip(beta_sample(rng, a_w[i], b_w[i])[0],
                                 clamp, 1.0 - clamp)
        q_up = q_low + (1.0 - q_low) * q_width
        node = dc.add(
            dc.beta_log_density(p.alpha_low, p.beta_low, q_low.reshape(-1, 1)),
            dc.beta_log_density(p.alpha_width, p.beta_width, q_width.reshape(-1, 1)))
        selections = []
        for i, scores in enumerate(scores_list):
            lo, hi = quantiles_to_indices(len(scores), q_low[i], q_up[i])
            selections.append(select(scores, lo, hi))
        return BatchRollout(selections=selections, log_prob_node=node,
                            log_prob_values=node.data.ravel().copy(),
                            q_low=q_low, q_up=q_up)

    def selection(self, scores: Sequence[float], rng: np.random.Generator,
                  greedy: bool = False) -> Tuple[List[int], BandAction]:
        action = self.greedy_action(scores) if greedy else self.act(scores, rng)
        return band_select(scores, action), action
