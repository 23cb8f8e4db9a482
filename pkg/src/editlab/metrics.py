"""Specificity metrics.

Ground-truth based: S-accuracy (exact greedy match), T-accuracy (teacher-forced
top-1 token ratio) and C-accuracy (old answer preferred over new answer on
neighbourhood queries).

Ground-truth free: KL divergence between the pre- and post-edit next-token
distributions at the query's last token, and top-k support overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BadIndicator, BadK, EmptyDataset, MissingCounterfactual, ModelMismatch
from .model import (
    ToyTransformer,
    greedy_decode,
    last_token_logits,
    log_softmax,
    teacher_force_score,
)
from .vocab import encode_answer, tokenize

PERCENT = 100.0


@dataclass(frozen=True)
class GroundTruthAnswer:
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("ground-truth answer must be non-empty")


@dataclass
class MetricReport:
    s_accuracy: float | None = None
    t_accuracy: float | None = None
    c_accuracy: float | None = None
    kl_mean: float | None = None
    topk_overlap: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "s_accuracy": self.s_accuracy,
            "t_accuracy": self.t_accuracy,
            "c_accuracy": self.c_accuracy,
            "kl_mean": self.kl_mean,
            "topk_overlap": {str(k): v for k, v in sorted(self.topk_overlap.items())},
            "n_queries": self.n_queries,
        }


def _qa_pairs(items) -> list[tuple[str, str]]:
    pairs = []
    for it in items:
        if isinstance(it, tuple):
            q, a = it
        else:
            q, a = it.query, it.gt_answer
        if isinstance(a, GroundTruthAnswer):
            a = a.text
        if a is None:
            raise EmptyDataset(f"query {q!r} has no ground-truth answer")
        pairs.append((q, a))
    if not pairs:
        raise EmptyDataset("no (query, answer) pairs")
    return pairs


def _queries(queries) -> list[str]:
    out = [q if isinstance(q, str) else q.query for q in queries]
    if not out:
        raise EmptyDataset("no queries")
    return out


def decode_matches(model: ToyTransformer, query: str, answer: str) -> bool:
    """True iff greedy decoding of ``query`` begins with exactly the answer's tokens."""
    ans = encode_answer(answer, model.vocab)
    out = greedy_decode(model, tokenize(query, model.vocab), len(ans))
    return out == ans


def s_accuracy(model: ToyTransformer, items) -> float:
    """Percentage of items whose greedy decode reproduces every answer token."""
    pairs = _qa_pairs(items)
    hits = sum(decode_matches(model, q, a) for q, a in pairs)
    return PERCENT * hits / len(pairs)


def t_accuracy(model: ToyTransformer, items) -> float:
    """Percentage of answer tokens (pooled over items) that are top-1 under teacher forcing."""
    pairs = _qa_pairs(items)
    correct = total = 0
    for q, a in pairs:
        score = teacher_force_score(model, tokenize(q, model.vocab), encode_answer(a, model.vocab))
        correct += int(np.sum(score.is_top1))
        total += len(score)
    return PERCENT * correct / total


def c_accuracy(model: ToyTransformer, items, comparator: str = "mean") -> float:
    """Percentage of (item, neighbourhood query) pairs where ``target_old`` beats ``target_new``.

    ``comparator="mean"`` compares mean per-token log-probabilities (average
    cross-entropy), ``"sum"`` compares full-answer probabilities.  Ties fail.
    Items without neighbourhood queries are skipped.
    """
    if comparator not in ("mean", "sum"):
        raise ValueError("comparator must be 'mean' or 'sum'")
    wins = total = 0
    for it in items:
        if not it.neighborhood_queries:
            continue
        if not it.target_old:
            raise MissingCounterfactual(f"item {it.id or it.query!r} has no target_old")
        old = encode_answer(it.target_old, model.vocab)
        new = encode_answer(it.target_new, model.vocab)
        for nq in it.neighborhood_queries:
            q = tokenize(nq, model.vocab)
            s_old = teacher_force_score(model, q, old)
            s_new = teacher_force_score(model, q, new)
            if comparator == "mean":
                wins += s_old.mean_logprob > s_new.mean_logprob
            else:
                wins += s_old.answer_logprob > s_new.answer_logprob
            total += 1
    if total == 0:
        raise EmptyDataset("no neighbourhood queries to score")
    return PERCENT * wins / total


# ---------------------------------------------------------------------------
# ground-truth free


def query_logits(model: ToyTransformer, queries) -> np.ndarray:
    """Last-token logits for each query, shape ``(n_queries, V)``."""
    return np.stack([last_token_logits(model, tokenize(q, model.vocab)) for q in _queries(queries)])


def _check_pair(pre: ToyTransformer, post: ToyTransformer):
    if pre.vocab != post.vocab:
        raise ModelMismatch("pre- and post-edit models have different vocabularies")


def kl_divergence(pre_logits: np.ndarray, post_logits: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(softmax(pre) || softmax(post))`` in nats.

    Rounding can leave values of order -1e-17 for nearly equal rows; those are
    clipped to 0.
    """
    lp = log_softmax(np.asarray(pre_logits, dtype=np.float64))
    lq = log_softmax(np.asarray(post_logits, dtype=np.float64))
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=-1), 0.0)


def kl_specificity(pre_model: ToyTransformer, post_model: ToyTransformer, queries) -> float:
    """Mean KL(pre || post) over the queries' last-token distributions."""
    _check_pair(pre_model, post_model)
    return float(np.mean(kl_divergence(query_logits(pre_model, queries), query_logits(post_model, queries))))


def top_k_set(logits: np.ndarray, k: int) -> np.ndarray:
    """Ids of the ``k`` highest logits; equal logits rank the lower id first."""
    return np.argsort(-np.asarray(logits), kind="stable")[:k]


def indicator(support: Iterable[int], size: int) -> np.ndarray:
    v = np.zeros(size, dtype=np.int64)
    v[list(support)] = 1
    return v


def _check_k(k: int, vocab_size: int):
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= vocab_size:
        raise BadK(f"k={k} outside [1, {vocab_size}]")


def topk_overlap_from_logits(pre_logits: np.ndarray, post_logits: np.ndarray, k: int) -> float:
    pre_logits = np.atleast_2d(pre_logits)
    post_logits = np.atleast_2d(post_logits)
    _check_k(k, pre_logits.shape[1])
    shared = sum(
        len(np.intersect1d(top_k_set(a, k), top_k_set(b, k), assume_unique=True))
        for a, b in zip(pre_logits, post_logits)
    )
    return PERCENT * shared / (k * len(pre_logits))


def topk_overlap(pre_model: ToyTransformer, post_model: ToyTransformer, queries, k: int) -> float:
    """Mean ``|S_k(pre) & S_k(post)| / k`` over queries, as a percentage."""
    _check_pair(pre_model, post_model)
    _check_k(k, pre_model.vocab_size)
    return topk_overlap_from_logits(query_logits(pre_model, queries), query_logits(post_model, queries), k)


def overlap_from_indicators(ind_a, ind_b, k: int) -> tuple[float, float]:
    """Overlap of two k-hot vectors computed as ``|A & B| / k`` and as ``1 - ||a - b||_1 / (2k)``.

    Both values are returned; they are always equal.
    """
    a = np.asarray(ind_a, dtype=np.int64)
    b = np.asarray(ind_b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise BadIndicator("indicator vectors must be 1-D and equally long")
    for v in (a, b):
        if not np.all((v == 0) | (v == 1)) or int(v.sum()) != k:
            raise BadIndicator(f"indicator must be 0/1 with exactly k={k} ones")
    # integer numerators keep both forms exact
    inter = int(np.sum(a & b))
    l1 = int(np.sum(np.abs(a - b)))
    set_form = inter / k
    l1_form = (2 * k - l1) / (2 * k)
    return set_form, l1_form


def evaluate(
    pre_model: ToyTransformer,
    post_model: ToyTransformer,
    preservation: Sequence,
    edit_items: Sequence = (),
    topk: Sequence[int] = (1, 5, 10),
    metrics: Iterable[str] = ("s_acc", "t_acc", "c_acc", "kl", "topk"),
    pre_logits: np.ndarray | None = None,
) -> MetricReport:
    """Run the enabled metrics on the preservation set (C-accuracy on ``edit_items``)."""
    _check_pair(pre_model, post_model)
    metrics = set(metrics)
    report = MetricReport(n_queries=len(preservation))
    with_gt = [p for p in preservation if getattr(p, "gt_answer", None)]
    if "s_acc" in metrics and with_gt:
        report.s_accuracy = s_accuracy(post_model, with_gt)
    if "t_acc" in metrics and with_gt:
        report.t_accuracy = t_accuracy(post_model, with_gt)
    if "c_acc" in metrics and any(it.neighborhood_queries for it in edit_items):
        report.c_accuracy = c_accuracy(post_model, edit_items)
    if "kl" in metrics or "topk" in metrics:
        if pre_logits is None:
            pre_logits = query_logits(pre_model, preservation)
        post_logits = query_logits(post_model, preservation)
        if "kl" in metrics:
            report.kl_mean = float(np.mean(kl_divergence(pre_logits, post_logits)))
        if "topk" in metrics:
            for k in topk:
                report.topk_overlap[int(k)] = topk_overlap_from_logits(pre_logits, post_logits, int(k))
    return report
