"""Decode a set of sessions and score it."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .model import ModelConfig, as_tensors, bundle_target, bundle_vectors, greedy_decode, \
    predict_intent


def strip_special(ids: Sequence[int]) -> list[int]:
    return [i for i in ids if i > 2]


def decode_sessions(bundles: Sequence, params: Mapping[str, np.ndarray], config: ModelConfig,
                    max_len: int = 50) -> list[list[int]]:
    P = as_tensors(params)
    return [greedy_decode(b.src_ids, bundle_vectors(b), P, config, max_len) for b in bundles]


def intent_accuracy(bundles: Sequence, params: Mapping[str, np.ndarray],
                    config: ModelConfig) -> float:
    if not bundles:
        return 0.0
    P = as_tensors(params)
    hits = sum(predict_intent(b.src_ids, bundle_vectors(b), P, config) == b.intent
               for b in bundles)
    return hits / len(bundles)


def mean_token_f1(predictions: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    if not predictions:
        return 0.0
    return float(np.mean([metrics.token_f1(strip_special(p), strip_special(r))
                          for p, r in zip(predictions, references)]))


def evaluate(bundles: Sequence, params: Mapping[str, np.ndarray], config: ModelConfig,
             target: str = "mcs", gold: bool = False) -> dict:
    """Full report: scaled corpus metrics, intent accuracy, per-session scores.

    ``gold=True`` scores the references against themselves.
    """
    refs = [strip_special(bundle_target(b, target)) for b in bundles]
    preds = refs if gold else [strip_special(p) for p in decode_sessions(bundles, params, config)]
    report = metrics.corpus_report(preds, refs)
    per_session = []
    for b, p, r in zip(bundles, preds, refs):
        s = metrics.sentence_scores(p, r)
        per_session.append({"id": b.session_id, "rouge_l": round(s["rouge_l"] * 100, 4),
                            "bleu": round(s["bleu"] * 100, 4),
                            "token_f1": round(metrics.token_f1(p, r) * 100, 4)})
    per_session.sort(key=lambda row: row["id"])
    out = {
        "n_sessions": len(bundles),
        "target": target,
        "metrics": report.scaled(),
        "token_f1": round(mean_token_f1(preds, refs) * 100, 4),
        "intent_accuracy": round((1.0 if gold else intent_accuracy(bundles, params, config)) * 100, 4),
        "per_session": per_session,
    }
    return out
