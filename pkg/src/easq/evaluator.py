"""Questionnaire-grounded ranking evaluation with HR@k, NDCG@k and MRR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Catalog, EventLog, encode_features
from .errors import ConfigError, InsufficientDataError
from .losses import DISSATISFIED, SATISFIED
from .model import EasqModel

HR_CUTS = (1, 5, 10)
NDCG_CUTS = (5, 10, 20)
METRICS = tuple(f"hr@{k}" for k in HR_CUTS) + tuple(f"ndcg@{k}" for k in NDCG_CUTS) + ("mrr",)


@dataclass
class EvalInstance:
    user_id: int
    positive_item: int
    candidates: np.ndarray
    provenance: list[str]
    ts: float


@dataclass
class EvalReport:
    status: str
    metrics: dict[str, float] = field(default_factory=dict)
    stderr: dict[str, float] = field(default_factory=dict)
    n_users: int = 0
    n_instances: int = 0

    def __getitem__(self, name: str) -> float:
        return self.metrics[name]

    def to_dict(self) -> dict:
        return {"status": self.status, "metrics": self.metrics, "stderr": self.stderr,
                "n_users": self.n_users, "n_instances": self.n_instances}

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def csv_header(self) -> str:
        cols = [m for m in METRICS] + [f"{m}_se" for m in METRICS]
        return ",".join(cols + ["n_users", "n_instances"])

    def csv_row(self) -> str:
        vals = [self.metrics.get(m, float("nan")) for m in METRICS]
        vals += [self.stderr.get(m, float("nan")) for m in METRICS]
        return ",".join([repr(float(v)) for v in vals] + [str(self.n_users), str(self.n_instances)])


def build_candidate_lists(users, items, answers, ts, n_items: int, list_size: int = 100,
                          seed: int = 0) -> list[EvalInstance]:
    """One instance per Satisfied answer.

    Negatives come first from the same user's Dissatisfied items, then from
    uniform corpus draws that avoid every item the user marked Satisfied.
    """
    if list_size < 2:
        raise ConfigError("list_size must be >= 2")
    if n_items < list_size:
        raise ConfigError(f"corpus of {n_items} items is smaller than list_size {list_size}")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    answers = np.asarray(answers, dtype=object)
    ts = np.asarray(ts, dtype=float)

    satisfied: dict[int, set[int]] = {}
    dissatisfied: dict[int, list[int]] = {}
    for u, i, a in zip(users, items, answers):
        if a == SATISFIED:
            satisfied.setdefault(int(u), set()).add(int(i))
        elif a == DISSATISFIED:
            bucket = dissatisfied.setdefault(int(u), [])
            if int(i) not in bucket:
                bucket.append(int(i))

    instances = []
    for k in np.nonzero(answers == SATISFIED)[0]:
        u, pos = int(users[k]), int(items[k])
        chosen = [pos]
        provenance = ["positive"]
        for neg in dissatisfied.get(u, []):
            if len(chosen) == list_size:
                break
            if neg not in satisfied[u] and neg not in chosen:
                chosen.append(neg)
                provenance.append("dissatisfied")
        banned = satisfied[u] | set(chosen)
        allowed = np.array([i for i in range(n_items) if i not in banned], dtype=np.int64)
        need = list_size - len(chosen)
        if need > len(allowed):
            raise ConfigError(f"not enough corpus items to fill a list of {list_size}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(k)]))
        fill = rng.choice(allowed, size=need, replace=False)
        chosen.extend(int(i) for i in fill)
        provenance.extend(["sampled"] * need)
        instances.append(EvalInstance(u, pos, np.array(chosen, dtype=np.int64), provenance,
                                      float(ts[k])))
    return instances


def instances_from_log(log: EventLog, n_items: int, list_size: int = 100,
                       seed: int = 0) -> list[EvalInstance]:
    return build_candidate_lists(log.user, log.item, log.answer, log.ts, n_items, list_size, seed)


def rank_of_positive(scores, candidates, positive: int) -> int:
    """1-based rank under descending score, ties broken by ascending item id."""
    scores = np.asarray(scores, dtype=float)
    candidates = np.asarray(candidates)
    order = np.lexsort((candidates, -scores))
    return int(np.nonzero(candidates[order] == positive)[0][0]) + 1


def rank_and_score(model: EasqModel, catalog: Catalog, instance: EvalInstance) -> tuple[np.ndarray, int]:
    n = len(instance.candidates)
    feats = encode_features(model.config, catalog, np.full(n, instance.user_id),
                            instance.candidates, np.full(n, instance.ts))
    scores = model.predict(feats)
    order = np.lexsort((instance.candidates, -scores))
    return instance.candidates[order], rank_of_positive(scores, instance.candidates,
                                                        instance.positive_item)


def score_instances(model: EasqModel, catalog: Catalog, instances: Sequence[EvalInstance],
                    chunk: int = 4096) -> list[int]:
    """Ranks for every instance, scoring candidates in large batches."""
    if not instances:
        return []
    users = np.concatenate([np.full(len(x.candidates), x.user_id) for x in instances])
    items = np.concatenate([x.candidates for x in instances])
    ts = np.concatenate([np.full(len(x.candidates), x.ts) for x in instances])
    feats = encode_features(model.config, catalog, users, items, ts)
    scores = np.concatenate([
        model.predict({k: v[s:s + chunk] for k, v in feats.items()})
        for s in range(0, len(items), chunk)])
    ranks, start = [], 0
    for x in instances:
        n = len(x.candidates)
        ranks.append(rank_of_positive(scores[start:start + n], x.candidates, x.positive_item))
        start += n
    return ranks


def instance_metrics(rank: int) -> dict[str, float]:
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    out = {f"hr@{k}": float(rank <= k) for k in HR_CUTS}
    gain = 1.0 / np.log2(rank + 1.0)
    out.update({f"ndcg@{k}": gain if rank <= k else 0.0 for k in NDCG_CUTS})
    out["mrr"] = 1.0 / rank
    return out


def compute_metrics(ranks: Sequence[int], users: Sequence[int] | None = None) -> EvalReport:
    """Per-user averages first, then the mean and standard error over users."""
    if len(ranks) == 0:
        return EvalReport("insufficient data")
    users = list(range(len(ranks))) if users is None else [int(u) for u in users]
    per_user: dict[int, list[dict[str, float]]] = {}
    for u, r in zip(users, ranks):
        per_user.setdefault(u, []).append(instance_metrics(int(r)))
    table = np.array([[np.mean([m[name] for m in rows]) for name in METRICS]
                      for _, rows in sorted(per_user.items())])
    mean = table.mean(axis=0)
    if len(table) > 1:
        se = table.std(axis=0, ddof=1) / np.sqrt(len(table))
    else:
        se = np.zeros(len(METRICS))
    return EvalReport("ok", dict(zip(METRICS, map(float, mean))),
                      dict(zip(METRICS, map(float, se))), len(per_user), len(ranks))


def evaluate(model: EasqModel, catalog: Catalog, instances: Sequence[EvalInstance]) -> EvalReport:
    ranks = score_instances(model, catalog, instances)
    return compute_metrics(ranks, [x.user_id for x in instances])


def require_ok(report: EvalReport) -> EvalReport:
    if report.status != "ok":
        raise InsufficientDataError("no Satisfied answers in the evaluation window")
    return report
