"""Closed-set accuracy, closed/open AUROC and multi-seed aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((predictions == labels).sum()) / predictions.size


def auroc(closed_scores, open_scores) -> float:
    """P(closed score > open score), ties counted 1/2, via the Mann-Whitney rank sum."""
    c = np.asarray(closed_scores, dtype=np.float64).ravel()
    o = np.asarray(open_scores, dtype=np.float64).ravel()
    if c.size == 0 or o.size == 0:
        raise ValueError("auroc needs nonempty closed and open score lists")
    ranks = stats.rankdata(np.concatenate([c, o]))  # midranks on ties
    n1, n2 = c.size, o.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def auroc_bruteforce(closed_scores, open_scores) -> float:
    c = np.asarray(closed_scores, dtype=np.float64).ravel()
    o = np.asarray(open_scores, dtype=np.float64).ravel()
    if c.size == 0 or o.size == 0:
        raise ValueError("auroc needs nonempty closed and open score lists")
    wins = (c[:, None] > o[None, :]).sum() + 0.5 * (c[:, None] == o[None, :]).sum()
    return float(wins / (c.size * o.size))


@dataclass(frozen=True)
class RunResult:
    split: str
    scorer_id: str
    seed: int
    closed_acc: float
    closed_open_auc: float
    n_closed_test: int
    n_open_test: int

    def __post_init__(self):
        if not (0 <= self.closed_acc <= 1 and 0 <= self.closed_open_auc <= 1):
            raise ValueError("accuracy and auc must lie in [0, 1]")
        if self.n_closed_test <= 0 or self.n_open_test <= 0:
            raise ValueError("test counts must be positive")


@dataclass(frozen=True)
class AggregateResult:
    split: str
    scorer_id: str
    n_runs: int
    mean_acc: float
    mean_auc: float
    ci95_acc: float
    ci95_auc: float
    seeds: tuple[int, ...] = ()

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = " ".join(str(s) for s in self.seeds)
        return d


def ci95_halfwidth(values) -> float:
    """Student-t 95% half-width of the mean; 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        return 0.0
    s = v.std(ddof=1)
    if s == 0:
        return 0.0
    return float(stats.t.ppf(0.975, n - 1) * s / np.sqrt(n))


def aggregate(runs: list[RunResult]) -> AggregateResult:
    if not runs:
        raise ValueError("nothing to aggregate")
    keys = {(r.split, r.scorer_id) for r in runs}
    if len(keys) > 1:
        raise ValueError(f"runs mix split/scorer ids: {sorted(keys)}")
    acc = [r.closed_acc for r in runs]
    auc = [r.closed_open_auc for r in runs]
    return AggregateResult(
        runs[0].split,
        runs[0].scorer_id,
        len(runs),
        float(np.mean(acc)),
        float(np.mean(auc)),
        ci95_halfwidth(acc),
        ci95_halfwidth(auc),
        tuple(sorted(r.seed for r in runs)),
    )


def bold_rule(aggregates: list[AggregateResult], metric: str = "auc") -> tuple[str, set[str]]:
    """Best scorer by mean, and every scorer whose mean lies within the best one's CI."""
    if not aggregates:
        raise ValueError("no aggregates")
    mean = lambda a: getattr(a, f"mean_{metric}")
    best = max(aggregates, key=mean)
    cutoff = mean(best) - getattr(best, f"ci95_{metric}")
    return best.scorer_id, {a.scorer_id for a in aggregates if mean(a) >= cutoff}
