"""Pair construction and the three training objectives.

Background for the alignment term
---------------------------------
Preference-based alignment starts from a Bradley-Terry likelihood over
ordered pairs, ``p(x+ > x- | u) = sigmoid(r(u, x+) - r(u, x-))``, and a
policy trained to maximise expected reward under a KL penalty towards a
reference policy ``pi_ref`` with temperature ``beta``. That constrained
problem has the closed-form maximiser

    pi*(x | u) = pi_ref(x | u) * exp(r(u, x) / beta) / Z(u),

with ``Z(u)`` the normaliser over items. Solving for the reward gives
``r(u, x) = beta * log(pi*(x|u) / pi_ref(x|u)) + beta * log Z(u)``. Put
this into the pairwise likelihood and ``Z(u)`` cancels because both items
share the user, leaving a loss on log-ratios only:

    L = -log sigmoid(beta * [log pi(x+)/pi_ref(x+) - log pi(x-)/pi_ref(x-)])

Here the policy is the main head and the reference is the satisfaction
head, detached. Raw scores can be negative, so both are mapped through
``softplus(.) + 1e-8`` before taking logs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import NumericError

BEHAVIOR, QUESTIONNAIRE = "behavior", "questionnaire"

SATISFIED, DISSATISFIED, UNCERTAIN, NONE = "SATISFIED", "DISSATISFIED", "UNCERTAIN", "NONE"
LABEL_VALUE = {SATISFIED: 1.0, UNCERTAIN: 0.5, DISSATISFIED: 0.0}

POLICY_EPS = 1e-8


@dataclass(frozen=True)
class PreferencePair:
    user_id: int
    item_pos: int
    item_neg: int
    source: str
    margin_label: float
    pos_row: int = -1
    neg_row: int = -1


@dataclass(frozen=True)
class BehaviorWeights:
    like: float = 0.5
    follow: float = 0.3
    comment_or_forward: float = 0.2


def behavior_score(progress, like, follow, comment, forward,
                   weights: BehaviorWeights = BehaviorWeights()) -> np.ndarray:
    """Composite engagement label used to order items for the main loss."""
    progress = np.asarray(progress, dtype=float)
    return (np.minimum(progress, 1.0)
            + weights.like * np.asarray(like, dtype=float)
            + weights.follow * np.asarray(follow, dtype=float)
            + weights.comment_or_forward * (np.asarray(comment, bool) | np.asarray(forward, bool)))


def _ordered_rows(users: np.ndarray, items: np.ndarray, labels: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Row pairs (a, b) of the same user with labels[a] > labels[b], sorted by (a, b)."""
    pos_parts, neg_parts = [], []
    _, inverse = np.unique(users, return_inverse=True)
    for g in range(inverse.max() + 1 if len(users) else 0):
        rows = np.nonzero(inverse == g)[0]
        if len(rows) < 2:
            continue
        y = labels[rows]
        better, worse = np.nonzero(y[:, None] > y[None, :])
        pos_parts.append(rows[better])
        neg_parts.append(rows[worse])
    if not pos_parts:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    pos = np.concatenate(pos_parts)
    neg = np.concatenate(neg_parts)
    keep = items[pos] != items[neg]
    pos, neg = pos[keep], neg[keep]
    order = np.lexsort((neg, pos))
    return pos[order], neg[order]


def _materialize(users, items, labels, pos, neg, source: str) -> list[PreferencePair]:
    return [PreferencePair(int(users[a]), int(items[a]), int(items[b]), source,
                           float(labels[a] - labels[b]), int(a), int(b))
            for a, b in zip(pos, neg)]


def behavior_pair_rows(users, items, scores, max_pairs: int | None = None,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of the behaviour pairs; see :func:`build_behavior_pairs`."""
    pos, neg = _ordered_rows(np.asarray(users), np.asarray(items),
                             np.asarray(scores, dtype=float))
    if max_pairs is not None and len(pos) > max_pairs:
        keep = np.sort(np.random.default_rng(seed).choice(len(pos), size=max_pairs,
                                                          replace=False))
        pos, neg = pos[keep], neg[keep]
    return pos, neg


def build_behavior_pairs(users, items, scores, max_pairs: int | None = None,
                         seed: int = 0) -> list[PreferencePair]:
    """All same-user pairs with strictly higher behaviour score first.

    When there are more than ``max_pairs`` the list is subsampled uniformly
    without replacement, reproducibly for a given ``seed``.
    """
    users, items = np.asarray(users), np.asarray(items)
    scores = np.asarray(scores, dtype=float)
    pos, neg = behavior_pair_rows(users, items, scores, max_pairs, seed)
    return _materialize(users, items, scores, pos, neg, BEHAVIOR)


def build_satis_pairs(users, items, answers,
                      dpo_include_uncertain: bool = False
                      ) -> tuple[list[PreferencePair], list[PreferencePair]]:
    """Questionnaire pairs for the satisfaction loss and for the DPO stream.

    Rows whose answer is NONE are ignored. The satisfaction loss takes every
    strict label difference; the DPO stream by default keeps only
    Satisfied-vs-Dissatisfied pairs.
    """
    answers = np.asarray(answers, dtype=object)
    answered = np.array([a in LABEL_VALUE for a in answers], dtype=bool)
    rows = np.nonzero(answered)[0]
    labels = np.full(len(answers), np.nan)
    labels[rows] = [LABEL_VALUE[a] for a in answers[rows]]
    users, items = np.asarray(users), np.asarray(items)
    pos, neg = _ordered_rows(users[rows], items[rows], labels[rows])
    satis = _materialize(users, items, labels, rows[pos], rows[neg], QUESTIONNAIRE)
    if dpo_include_uncertain:
        dpo = list(satis)
    else:
        dpo = [p for p in satis if p.margin_label == 1.0]
    return satis, dpo


def _rows(pairs: Sequence[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([p.pos_row for p in pairs], dtype=np.intp),
            np.array([p.neg_row for p in pairs], dtype=np.intp))


def zero_loss() -> Tensor:
    return dc.constant(0.0)


def pairwise_logistic(pos_rows, neg_rows, scores: Tensor) -> Tensor:
    """Mean of ``-log sigmoid(score[pos] - score[neg])``."""
    if len(pos_rows) == 0:
        return zero_loss()
    margin = dc.sub(dc.take(scores, pos_rows), dc.take(scores, neg_rows))
    return dc.scale(dc.mean(dc.log_sigmoid(margin)), -1.0)


def bpr_loss(pairs: Sequence[PreferencePair], y_hat: Tensor) -> Tensor:
    return pairwise_logistic(*_rows(pairs), y_hat)


def satis_loss(pairs: Sequence[PreferencePair], s_hat: Tensor) -> Tensor:
    return pairwise_logistic(*_rows(pairs), s_hat)


def dpo_loss(pairs: Sequence[PreferencePair], y_hat: Tensor, s_hat: Tensor,
             beta: float = 0.1) -> Tensor:
    """Online DPO with the detached satisfaction head as reference policy."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not pairs:
        return zero_loss()
    pos, neg = _rows(pairs)
    log_policy = dc.log(dc.add_scalar(dc.softplus(y_hat), POLICY_EPS))
    log_ref = dc.log(dc.add_scalar(dc.softplus(dc.stop_grad(s_hat)), POLICY_EPS))
    ratio = dc.sub(log_policy, log_ref)
    inner = dc.scale(dc.sub(dc.take(ratio, pos), dc.take(ratio, neg)), beta)
    loss = dc.scale(dc.mean(dc.log_sigmoid(inner)), -1.0)
    if not np.isfinite(loss.values).all():
        raise NumericError("DPO loss is not finite")
    return loss


def dpo_pair_value(pi_pos: float, ref_pos: float, pi_neg: float, ref_neg: float,
                   beta: float = 0.1) -> float:
    """Closed-form per-pair DPO loss for already-positive policy values."""
    inner = beta * (np.log(pi_pos / ref_pos) - np.log(pi_neg / ref_neg))
    return float(np.logaddexp(0.0, -inner))


def total_loss(l_main: Tensor | None, l_satis: Tensor | None, l_dpo: Tensor | None,
               lambda1: float, lambda2: float) -> Tensor:
    """``L_main + lambda1 * L_satis + lambda2 * L_DPO``; missing terms count as 0."""
    total = l_main if l_main is not None else zero_loss()
    for term, weight in ((l_satis, lambda1), (l_dpo, lambda2)):
        if term is None or weight == 0:
            continue
        total = dc.add(total, dc.scale(term, weight))
    return total
