"""Score-function policy-gradient training with an EMA baseline.

One step: roll the policy over a batch of instances, score each sampled
action's log-probability on the tape, weight by the advantage
(reward minus the pre-update baseline), average, backprop, clip the
global gradient norm, apply bias-corrected Adam, then fold the batch mean
reward into the baseline: b' = c * b + (1 - c) * mean(r). No entropy
bonus and no token-usage penalty; the objective is prediction accuracy
alone.

Checkpoints are self-describing: magic bytes, format version, a JSON
header (configs, counters, RNG state, config hash, tensor manifest),
then named tensors as little-endian float64. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from . import environ
from . import policy as pol
from . import strategies
from .diffcore import Tape, Tensor
from .errors import CheckpointFormatError, NumericError, UsageError

CHECKPOINT_MAGIC = b"LDARCKPT"
CHECKPOINT_VERSION = 1

METRICS_HEADER = ("step", "mean_reward", "baseline", "loss",
                  "mean_qL", "mean_qU", "passage_ratio", "token_ratio")


@dataclass(frozen=True)
class TrainerConfig:
    batch_size: int = 32
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_coeff: float = 0.5
    total_steps: int = 2000
    grad_clip_norm: float = 5.0
    seed: int = 0
    eval_every: int = 500  # 0 disables periodic held-out evals

    def validate(self) -> None:
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise UsageError("learning_rate must be positive")
        if not (0.0 <= self.ema_coeff <= 1.0):
            raise UsageError("ema_coeff must lie in [0, 1]")
        if self.total_steps < 1:
            raise UsageError("total_steps must be >= 1")
        if self.grad_clip_norm <= 0.0:
            raise UsageError("grad_clip_norm must be positive (inf disables)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainerState:
    step: int = 0
    baseline: float = 0.0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: Dict[str, Tensor]) -> "TrainerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    baseline: float
    loss: float
    mean_q_low: float
    mean_q_up: float
    passage_ratio: float
    token_ratio: float

    def row(self) -> str:
        vals = (self.step, self.mean_reward, self.baseline, self.loss,
                self.mean_q_low, self.mean_q_up, self.passage_ratio,
                self.token_ratio)
        return ",".join(str(v) if isinstance(v, int) else format(v, ".12g")
                        for v in vals)


# ---------------------------------------------------------------------------
# optimizer


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients by max_norm/|g| when the global norm exceeds it.

    Direction is preserved exactly. Returns the pre-clip norm.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if math.isfinite(max_norm) and total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: TrainerState, cfg: TrainerConfig) -> None:
    """Bias-corrected Adam update in place; advances the step counter."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# one REINFORCE step


PolicyLike = Union[pol.BandPolicy, strategies.BernoulliPolicy]


def reinforce_step(policy: PolicyLike, state: TrainerState,
                   batch: Sequence[environ.Instance], cfg: TrainerConfig,
                   rng: np.random.Generator, oracle=None) -> StepMetrics:
    if not batch:
        raise UsageError("reinforce_step requires a non-empty batch")
    dc.zero_grads(policy.params.values())
    size = len(batch)
    base = state.baseline

    # Instances with equal passage counts share one stacked forward pass.
    groups: Dict[int, List[int]] = {}
    for i, inst in enumerate(batch):
        groups.setdefault(inst.n, []).append(i)

    rewards = np.zeros(size)
    q_low = np.zeros(size)
    q_up = np.zeros(size)
    p_ratio = np.zeros(size)
    t_ratio = np.zeros(size)
    with Tape() as tape:
        loss_node: Optional[Tensor] = None
        for positions in groups.values():
            out = policy.rollout_batch([batch[i].scores for i in positions], rng)
            bad = np.flatnonzero(~np.isfinite(out.log_prob_values))
            if bad.size:
                raise NumericError("non-finite log-probability on instance "
                                   f"{batch[positions[int(bad[0])]].id!r}")
            for j, i in enumerate(positions):
                inst = batch[i]
                sel = out.selections[j]
                rewards[i] = environ.reward(inst, sel, rng=rng, oracle=oracle)
                q_low[i] = out.q_low[j]
                q_up[i] = out.q_up[j]
                p_ratio[i] = environ.passage_ratio(inst, sel)
                t_ratio[i] = environ.token_ratio(inst, sel)
            adv = np.array([rewards[i] - base for i in positions]).reshape(-1, 1)
            term = dc.sum_all(dc.mul(out.log_prob_node, Tensor(-adv)))
            loss_node = term if loss_node is None else dc.add(loss_node, term)
        loss_node = dc.scale(loss_node, 1.0 / size)
        loss = loss_node.item()
        if not math.isfinite(loss):
            ids = ",".join(i.id for i in batch)
            raise NumericError(f"non-finite loss over batch [{ids}]")
        grads = dc.backward(tape, loss_node, params=policy.params)
    clip_global_norm(grads, cfg.grad_clip_norm)
    adam_step(policy.params, grads, state, cfg)
    mean_r = float(rewards.mean())
    state.baseline = cfg.ema_coeff * base + (1.0 - cfg.ema_coeff) * mean_r
    return StepMetrics(
        step=state.step,
        mean_reward=mean_r,
        baseline=state.baseline,
        loss=loss,
        mean_q_low=float(q_low.mean()),
        mean_q_up=float(q_up.mean()),
        passage_ratio=float(p_ratio.mean()),
        token_ratio=float(t_ratio.mean()),
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str
    policy_config: pol.PolicyConfig
    params: Dict[str, np.ndarray]
    trainer_config: Optional[TrainerConfig] = None
    state: Optional[TrainerState] = None
    rng_state: Optional[dict] = None

    def build_policy(self) -> PolicyLike:
        tensors = {k: Tensor(v.copy(), requires_grad=True, name=k)
                   for k, v in self.params.items()}
        if self.kind == "band":
            return pol.BandPolicy(self.policy_config, params=tensors)
        if self.kind == "bernoulli":
            return strategies.BernoulliPolicy(self.policy_config, params=tensors)
        raise CheckpointFormatError(f"unknown policy kind {self.kind!r}")


def _config_hash(kind: str, pcfg: pol.PolicyConfig,
                 tcfg: Optional[TrainerConfig]) -> str:
    blob = json.dumps({"kind": kind, "policy": pcfg.to_dict(),
                       "trainer": tcfg.to_dict() if tcfg else None},
                      sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _expected_shapes(kind: str, pcfg: pol.PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    if kind == "band":
        return pol.band_param_shapes(pcfg)
    if kind == "bernoulli":
        return pol.bernoulli_param_shapes(pcfg)
    raise CheckpointFormatError(f"unknown policy kind {kind!r}")


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    tensors: List[Tuple[str, np.ndarray]] = [
        (f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    if ckpt.state is not None:
        tensors += [(f"adam_m/{k}", v) for k, v in sorted(ckpt.state.m.items())]
        tensors += [(f"adam_v/{k}", v) for k, v in sorted(ckpt.state.v.items())]
    header = {
        "kind": ckpt.kind,
        "policy_config": ckpt.policy_config.to_dict(),
        "trainer_config": ckpt.trainer_config.to_dict() if ckpt.trainer_config else None,
        "step": ckpt.state.step if ckpt.state else 0,
        "baseline": ckpt.state.baseline if ckpt.state else 0.0,
        "rng_state": ckpt.rng_state,
        "config_hash": _config_hash(ckpt.kind, ckpt.policy_config,
                                    ckpt.trainer_config),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt header") from e

    kind = header.get("kind")
    try:
        pcfg = pol.PolicyConfig.from_dict(header["policy_config"])
        tcfg = (TrainerConfig.from_dict(header["trainer_config"])
                if header.get("trainer_config") else None)
    except (KeyError, TypeError, UsageError) as e:
        raise CheckpointFormatError(f"{path}: bad config block: {e}") from e
    if header.get("config_hash") != _config_hash(kind, pcfg, tcfg):
        raise CheckpointFormatError(f"{path}: config hash mismatch")

    offset = 16 + hlen
    named: Dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8")
        named[name] = arr.reshape([int(s) for s in shape]).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: trailing bytes after tensors")

    expected = _expected_shapes(kind, pcfg)
    params: Dict[str, np.ndarray] = {}
    for name, arr in named.items():
        group, _, base = name.partition("/")
        if group not in ("param", "adam_m", "adam_v"):
            raise CheckpointFormatError(f"{path}: unknown tensor group {name!r}")
        if base not in expected or tuple(arr.shape) != expected[base]:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} has shape {arr.shape}, "
                f"config implies {expected.get(base)}")
        if group == "param":
            params[base] = arr
    if set(params) != set(expected):
        raise CheckpointFormatError(f"{path}: parameter set does not match config")

    state = None
    has_adam = any(n.startswith("adam_m/") for n in named)
    if has_adam:
        state = TrainerState(
            step=int(header.get("step", 0)),
            baseline=float(header.get("baseline", 0.0)),
            m={n.split("/", 1)[1]: a for n, a in named.items()
               if n.startswith("adam_m/")},
            v={n.split("/", 1)[1]: a for n, a in named.items()
               if n.startswith("adam_v/")},
        )
    return Checkpoint(kind=kind, policy_config=pcfg, params=params,
                      trainer_config=tcfg, state=state,
                      rng_state=header.get("rng_state"))


def checkpoint_of(policy: PolicyLike, tcfg: Optional[TrainerConfig] = None,
                  state: Optional[TrainerState] = None,
                  rng: Optional[np.random.Generator] = None) -> Checkpoint:
    return Checkpoint(
        kind=policy.kind,
        policy_config=policy.config,
        params={k: p.data.copy() for k, p in policy.params.items()},
        trainer_config=tcfg,
        state=state,
        rng_state=rng.bit_generator.state if rng is not None else None,
    )


def restore_rng(rng_state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = rng_state
    return gen


# ---------------------------------------------------------------------------
# full training run


@dataclass
class TrainResult:
    policy: PolicyLike
    state: TrainerState
    metrics_path: Optional[Path]
    checkpoint_path: Optional[Path]
    train_instances: List[environ.Instance]
    held_instances: List[environ.Instance]
    held_reward: float


def split_dataset(instances: Sequence[environ.Instance],
                  seed: int) -> Tuple[List[environ.Instance], List[environ.Instance]]:
    """Seeded 80/20 train/held split; tiny datasets reuse train as held."""
    n = len(instances)
    if n < 5:
        return list(instances), list(instances)
    order = np.random.default_rng(np.random.SeedSequence((seed, 1))).permutation(n)
    cut = int(n * 0.8)
    train = [instances[int(i)] for i in order[:cut]]
    held = [instances[int(i)] for i in order[cut:]]
    return train, held


def _held_mean_reward(policy: PolicyLike, held: Sequence[environ.Instance],
                      seed: int, oracle=None) -> float:
    if not held:
        return 0.0
    total = 0.0
    for inst in held:
        rng = instance_rng(seed, inst.id)
        sel, _ = policy.selection(inst.scores, rng)
        total += environ.reward(inst, sel, rng=rng, oracle=oracle)
    return total / len(held)


def instance_rng(base_seed: int, instance_id: str) -> np.random.Generator:
    """Deterministic per-instance stream derived from the id."""
    import zlib

    crc = zlib.crc32(instance_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((base_seed, crc)))


def train(instances: Sequence[environ.Instance], kind: str,
          pcfg: pol.PolicyConfig, tcfg: TrainerConfig,
          out_dir: Optional[Union[str, Path]] = None,
          quiet: bool = True, oracle=None) -> TrainResult:
    """Run REINFORCE for total_steps batches and checkpoint the result."""
    tcfg.validate()
    if not instances:
        raise UsageError("training requires a non-empty dataset")
    if kind == "band":
        policy: PolicyLike = pol.BandPolicy(pcfg, seed=tcfg.seed)
    elif kind == "bernoulli":
        policy = strategies.BernoulliPolicy(pcfg, seed=tcfg.seed)
    else:
        raise UsageError(f"unknown policy kind {kind!r}")

    train_set, held = split_dataset(instances, tcfg.seed)
    state = TrainerState.init(policy.params)
    run_rng = np.random.default_rng(np.random.SeedSequence((tcfg.seed, 2)))
    eval_seed = tcfg.seed + 7919

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_path = ckpt_path = None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / "metrics.csv"
        ckpt_path = out_path / "final.ckpt"
        metrics_file = open(metrics_path, "w", encoding="utf-8")
        metrics_file.write(",".join(METRICS_HEADER) + "\n")

    try:
        step = 0
        while step < tcfg.total_steps:
            order = run_rng.permutation(len(train_set))
            for lo in range(0, len(order), tcfg.batch_size):
                if step >= tcfg.total_steps:
                    break
                batch = [train_set[int(i)] for i in order[lo:lo + tcfg.batch_size]]
                metrics = reinforce_step(policy, state, batch, tcfg,
                                         run_rng, oracle=oracle)
                step = state.step
                if metrics_file is not None:
                    metrics_file.write(metrics.row() + "\n")
                if tcfg.eval_every > 0 and step % tcfg.eval_every == 0:
                    held_r = _held_mean_reward(policy, held, eval_seed, oracle)
                    if not quiet:
                        print(f"step {step}: train reward {metrics.mean_reward:.3f} "
                              f"held-out reward {held_r:.3f}")
                    if out_path is not None:
                        save_checkpoint(
                            checkpoint_of(policy, tcfg, state, run_rng),
                            out_path / f"step{step:06d}.ckpt")
    finally:
        if metrics_file is not None:
            metrics_file.close()

    held_r = _held_mean_reward(policy, held, eval_seed, oracle)
    if ckpt_path is not None:
        save_checkpoint(checkpoint_of(policy, tcfg, state, run_rng), ckpt_path)
    if not quiet:
        print(f"done: {state.step} steps, held-out reward {held_r:.3f}")
    return TrainResult(policy=policy, state=state, metrics_path=metrics_path,
                       checkpoint_path=ckpt_path, train_instances=train_set,
                       held_instances=held, held_reward=held_r)
