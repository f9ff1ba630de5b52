"""Open-set scores. Every scorer is oriented so that higher means closed set."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .nnet import TwoHeadModel, forward, to_input

SCORERS = ("t3po", "msp", "maxlogit", "mcdropout")
SIMPLEX_TOL = 1e-6


class UnsupportedScorer(ValueError):
    pass


def _check_simplex(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ValueError("empty probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < -SIMPLEX_TOL):
        raise ValueError("probabilities must be finite and nonnegative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("probabilities must sum to 1")
    return p


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def t3po_score(xform_probs):
    """Confidence of the transform head: max over the 7 transform probabilities.

    Must be computed on an untransformed tile. Accepts one vector or a batch
    (last axis = transforms).
    """
    return _scalar(_check_simplex(xform_probs).max(axis=-1))


def msp_score(class_probs):
    return _scalar(_check_simplex(class_probs).max(axis=-1))


def maxlogit_score(class_logits):
    z = np.asarray(class_logits, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("empty logit vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return _scalar(z.max(axis=-1))


def entropy(p, axis=-1):
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


@torch.no_grad()
def mc_class_probs(model: TwoHeadModel, tiles: np.ndarray, n_passes: int = 32, dropout_rate: float = 0.2, seed: int = 0) -> np.ndarray:
    """Class probabilities from ``n_passes`` dropout-active passes, shape (passes, B, N).

    Only dropout modules are put in training mode; batch norm stays frozen.
    """
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    if model.dropout is None and dropout_rate > 0:
        raise ValueError("model has no dropout layer; MC-Dropout needs one")
    dtype = next(model.parameters()).dtype
    x = to_input(tiles, model.pretrained, dtype)
    was_training = model.training
    old_p = model.dropout.p if model.dropout is not None else None
    model.eval()
    if model.dropout is not None:
        model.dropout.p = dropout_rate
        model.dropout.train()
    out = []
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for _ in range(n_passes):
                cl, _ = model(x)
                out.append(torch.softmax(cl.double(), 1).numpy())
    finally:
        if model.dropout is not None:
            model.dropout.p = old_p
        model.train(was_training)
    return np.stack(out)


def mcdropout_from_passes(probs: np.ndarray, mode: str = "predictive"):
    """Negated entropy of MC passes ``(passes, ..., N)``.

    ``predictive``: entropy of the mean distribution. ``mean``: mean of the
    per-pass entropies.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if mode == "predictive":
        return _scalar(-entropy(probs.mean(axis=0)))
    if mode == "mean":
        return _scalar(-entropy(probs).mean(axis=0))
    raise ValueError(f"unknown entropy mode {mode!r}")


def mcdropout_score(model, tiles, n_passes=32, dropout_rate=0.2, seed=0, mode="predictive"):
    tiles = np.asarray(tiles)
    single = tiles.ndim == 3
    probs = mc_class_probs(model, tiles[None] if single else tiles, n_passes, dropout_rate, seed)
    s = mcdropout_from_passes(probs, mode)
    return float(s[0]) if single else s


@dataclass(frozen=True)
class ScoredPrediction:
    predicted_class: int
    class_probs: np.ndarray
    osr_score: float
    scorer_id: str
    true_class: int = -1
    path: str = ""


def score_split(model: TwoHeadModel, batches: Iterable, scorer_id: str, scorer_params: dict | None = None) -> list[ScoredPrediction]:
    """One record per tile, in iterator order. Predictions always come from the class head."""
    if scorer_id not in SCORERS:
        raise UnsupportedScorer(f"unsupported scorer {scorer_id!r}; choose from {SCORERS}")
    params = dict(scorer_params or {})
    out: list[ScoredPrediction] = []
    for bi, b in enumerate(batches):
        try:
            fo = forward(model, b.tiles)
            if scorer_id == "t3po":
                s = t3po_score(fo.xform_probs)
            elif scorer_id == "msp":
                s = msp_score(fo.class_probs)
            elif scorer_id == "maxlogit":
                s = maxlogit_score(fo.class_logits)
            else:
                seed = params.get("seed", 0)
                s = mcdropout_score(
                    model,
                    b.tiles,
                    n_passes=params.get("n_passes", 32),
                    dropout_rate=params.get("dropout_rate", 0.2),
                    # one stream per batch keeps scores independent of later batches
                    seed=int(np.random.SeedSequence([seed, bi]).generate_state(1)[0]),
                    mode=params.get("mode", "predictive"),
                )
        except Exception as exc:
            paths = ", ".join(str(p) for p in b.paths[:3])
            raise RuntimeError(f"scoring failed on batch {bi} ({paths}...): {exc}") from exc
        pred = fo.class_probs.argmax(axis=1)
        for i in range(len(b)):
            out.append(
                ScoredPrediction(
                    int(pred[i]),
                    fo.class_probs[i],
                    float(s[i]),
                    scorer_id,
                    int(b.class_labels[i]),
                    str(b.paths[i]) if b.paths else "",
                )
            )
    return out


SCORE_COLUMNS = ["path", "true_class", "predicted_class", "osr_score", "scorer_id", "seed"]


def write_scores(path, closed: list[ScoredPrediction], opened: list[ScoredPrediction], class_names, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for r in closed:
            w.writerow([r.path, class_names[r.true_class], class_names[r.predicted_class], repr(r.osr_score), r.scorer_id, seed])
        for r in opened:
            w.writerow([r.path, "OPEN", class_names[r.predicted_class], repr(r.osr_score), r.scorer_id, seed])


def read_scores(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["osr_score"] = float(r["osr_score"])
        r["seed"] = int(r["seed"])
    return rows
