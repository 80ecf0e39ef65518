"""Dataset I/O, strategy evaluation, and comparison tables.

Dataset files are line-delimited JSON, one instance per line, either with
precomputed similarity scores or with raw embedding vectors (in which
case cosine similarities are computed at load). Evaluation runs each
strategy once over a dataset with per-instance seeded RNG streams;
learned policies are evaluated with sampled actions (the stochastic
policy as trained) unless greedy Beta-mean actions are requested.

Aggregation note: token- and passage-usage ratios are means of
per-instance ratios, not ratios of sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import environ
from . import policy as pol
from . import strategies
from . import trainer
from .errors import DataError, UsageError

DATASET_FIELDS = ("id", "scores", "tokens", "gold", "weights", "reward")
TABLE_HEADER = ("strategy", "score", "token_ratio", "passage_ratio")
ROWS_HEADER = ("id", "reward", "token_ratio", "passage_ratio", "band")


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(instances: Sequence[environ.Instance],
                 path: Union[str, Path]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            record = {
                "id": inst.id,
                "scores": [float(s) for s in inst.scores],
                "tokens": [int(t) for t in inst.token_counts],
                "gold": [int(g) for g in inst.gold],
                "weights": [float(w) for w in inst.distractor_weights],
                "reward": inst.reward_model.to_dict(),
            }
            f.write(json.dumps(record) + "\n")


def _instance_from_record(record: dict, lineno: int) -> environ.Instance:
    def fail(msg: str) -> DataError:
        return DataError(f"line {lineno}: {msg}")

    if not isinstance(record, dict):
        raise fail("record is not an object")
    if "id" not in record:
        raise fail("missing field 'id'")
    if "scores" in record:
        scores = np.asarray(record["scores"], dtype=np.float64)
        if scores.ndim != 1 or scores.size == 0:
            raise fail("'scores' must be a non-empty list of numbers")
    elif "query_vec" in record and "passage_vecs" in record:
        try:
            scores = environ.cosine_scores(record["query_vec"],
                                           record["passage_vecs"])
        except (UsageError, ValueError) as e:
            raise fail(f"bad embedding vectors: {e}") from None
    else:
        raise fail("missing 'scores' (or 'query_vec' + 'passage_vecs')")
    for name in ("tokens", "gold", "weights", "reward"):
        if name not in record:
            raise fail(f"missing field {name!r}")
    n = scores.shape[0]
    tokens = np.asarray(record["tokens"], dtype=np.int64)
    weights = np.asarray(record["weights"], dtype=np.float64)
    if tokens.shape != (n,) or weights.shape != (n,):
        raise fail("'tokens' and 'weights' must match the passage count")
    try:
        rm = environ.RewardModel.from_dict(record["reward"])
    except (DataError, TypeError, ValueError) as e:
        raise fail(f"bad reward block: {e}") from None
    inst = environ.Instance(
        id=str(record["id"]),
        scores=np.clip(scores, -1.0, 1.0),
        token_counts=tokens,
        gold=tuple(sorted(int(g) for g in record["gold"])),
        distractor_weights=weights,
        reward_model=rm,
    )
    try:
        inst.validate()
    except DataError as e:
        raise fail(str(e)) from None
    return inst


def load_dataset(path: Union[str, Path]) -> List[environ.Instance]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    instances = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
        instances.append(_instance_from_record(record, lineno))
    if not instances:
        raise DataError(f"dataset {path} contains no instances")
    return instances


def force_external(instances: Sequence[environ.Instance]) -> List[environ.Instance]:
    """Rewrites every instance's reward kind to 'external'."""
    out = []
    for inst in instances:
        rm = environ.RewardModel(kind="external",
                                 capacity=inst.reward_model.capacity,
                                 overload_limit=inst.reward_model.overload_limit,
                                 flip_prob=0.0)
        out.append(environ.Instance(id=inst.id, scores=inst.scores,
                                    token_counts=inst.token_counts,
                                    gold=inst.gold,
                                    distractor_weights=inst.distractor_weights,
                                    reward_model=rm))
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    id: str
    reward: int
    token_ratio: float
    passage_ratio: float
    band: Optional[Tuple[int, int]] = None


@dataclass
class EvalReport:
    strategy: str
    n_instances: int
    mean_score: float
    mean_token_ratio: float
    mean_passage_ratio: float
    rows: List[EvalRow]


def _resolve(spec: strategies.StrategySpec):
    if spec.kind.endswith("_checkpoint"):
        ckpt = trainer.load_checkpoint(spec.path)
        want = "band" if spec.kind == "ldar_checkpoint" else "bernoulli"
        if ckpt.kind != want:
            raise UsageError(
                f"checkpoint {spec.path} holds a {ckpt.kind} policy, "
                f"but strategy {spec.kind} needs {want}")
        return ckpt.build_policy()
    return None


def evaluate(spec: Union[strategies.StrategySpec, trainer.PolicyLike],
             instances: Sequence[environ.Instance], seed: int = 0,
             greedy: bool = False, oracle=None) -> EvalReport:
    """One pass over the dataset; means are over per-instance rows."""
    if not instances:
        raise UsageError("evaluate requires a non-empty dataset")
    if isinstance(spec, strategies.StrategySpec):
        spec.validate()
        label = spec.label
        policy = _resolve(spec)
    else:
        policy = spec
        label = "ldar" if policy.kind == "band" else policy.kind
        spec = None

    rows: List[EvalRow] = []
    for inst in instances:
        rng = trainer.instance_rng(seed, inst.id)
        band = None
        if policy is not None:
            selection, action = policy.selection(inst.scores, rng, greedy=greedy)
            if action is not None:
                band = pol.quantiles_to_indices(inst.n, action.q_low, action.q_up)
        elif spec.kind == "top_k":
            selection = strategies.top_k(inst.scores, spec.k)
        elif spec.kind == "long_context":
            selection = strategies.long_context(inst.scores)
        else:
            selection = strategies.adaptive_k(inst.scores)
        r = environ.reward(inst, selection, rng=rng, oracle=oracle)
        rows.append(EvalRow(id=inst.id, reward=r,
                            token_ratio=environ.token_ratio(inst, selection),
                            passage_ratio=environ.passage_ratio(inst, selection),
                            band=band))
    n = len(rows)
    return EvalReport(
        strategy=label,
        n_instances=n,
        mean_score=sum(r.reward for r in rows) / n,
        mean_token_ratio=sum(r.token_ratio for r in rows) / n,
        mean_passage_ratio=sum(r.passage_ratio for r in rows) / n,
        rows=rows,
    )


def write_rows(report: EvalReport, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(ROWS_HEADER) + "\n")
        for r in report.rows:
            band = f"{r.band[0]}:{r.band[1]}" if r.band else ""
            f.write(f"{r.id},{r.reward},{format(r.token_ratio, '.12g')},"
                    f"{format(r.passage_ratio, '.12g')},{band}\n")


# ---------------------------------------------------------------------------
# comparison tables


def _table_csv(reports: Sequence[EvalReport]) -> str:
    lines = [",".join(TABLE_HEADER)]
    for rep in reports:
        lines.append(f"{rep.strategy},{format(rep.mean_score, '.12g')},"
                     f"{format(rep.mean_token_ratio, '.12g')},"
                     f"{format(rep.mean_passage_ratio, '.12g')}")
    return "\n".join(lines) + "\n"


def render_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text rendering of the comparison table."""
    rows = [TABLE_HEADER] + [
        (rep.strategy, f"{rep.mean_score:.4f}", f"{rep.mean_token_ratio:.4f}",
         f"{rep.mean_passage_ratio:.4f}") for rep in reports]
    widths = [max(len(r[c]) for r in rows) for c in range(len(TABLE_HEADER))]
    out = []
    for i, r in enumerate(rows):
        out.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def sweep_top_k(instances: Sequence[environ.Instance], seed: int = 0,
                ks: Optional[Sequence[int]] = None,
                oracle=None) -> List[Tuple[int, EvalReport]]:
    """Fixed-k sweep used for the usage-vs-score curves."""
    n = max(inst.n for inst in instances)
    if ks is None:
        ks = [1, 5, 10, 25, 50]
    ks = sorted({k for k in ks if 1 <= k < n} | {n})
    out = []
    for k in ks:
        spec = strategies.StrategySpec("top_k", k=k)
        out.append((k, evaluate(spec, instances, seed=seed, oracle=oracle)))
    return out


def compare(specs: Sequence[strategies.StrategySpec],
            instances: Sequence[environ.Instance], seed: int = 0,
            out_path: Optional[Union[str, Path]] = None,
            greedy: bool = False, oracle=None,
            sweep: bool = True) -> Tuple[List[EvalReport], str]:
    """Evaluate every strategy and render the comparison table.

    With an output path, writes the CSV table and a per-k sweep file
    (suffix .sweep.csv) for plotting score against usage.
    """
    if not specs:
        raise UsageError("compare requires at least one strategy")
    reports = []
    for spec in specs:
        try:
            reports.append(evaluate(spec, instances, seed=seed,
                                    greedy=greedy, oracle=oracle))
        except (UsageError, DataError) as e:
            raise type(e)(f"strategy {spec.label}: {e}") from e
    text = render_table(reports)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.write_text(_table_csv(reports), encoding="utf-8")
        if sweep:
            sweep_path = out_path.with_name(out_path.stem + ".sweep.csv")
            lines = ["k,score,token_ratio,passage_ratio"]
            for k, rep in sweep_top_k(instances, seed=seed, oracle=oracle):
                lines.append(f"{k},{format(rep.mean_score, '.12g')},"
                             f"{format(rep.mean_token_ratio, '.12g')},"
                             f"{format(rep.mean_passage_ratio, '.12g')}")
            sweep_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return reports, text
