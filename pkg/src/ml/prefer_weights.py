#!/usr/bin/env python3
"""
PREFER Boosting Weight Math
Weighted error, learner weight and instance reweighting for prompt boosting

Multiclass AdaBoost (SAMME) updates over a WeightedDataset. Everything here
is a pure function of its arguments; the training loop in
core.prefer_booster chains them.
"""

from typing import Optional, Sequence

import numpy as np

from src.core.prefer_templates import ErrorEntry, ErrorInfo
from src.core.prefer_types import ABSTAIN, ContractError, PreferError, WeightedDataset

DEFAULT_EPS = 1e-6


class Converged(PreferError):
    """Every training example is classified correctly; no feedback is possible."""


def wrong_indicator(predictions: Sequence[Optional[str]], dataset: WeightedDataset) -> np.ndarray:
    """
    1.0 where a prediction misses its gold label, else 0.0.

    Abstentions always count as wrong.
    """
    if len(predictions) != len(dataset):
        raise ContractError(
            f"{len(predictions)} predictions for {len(dataset)} examples"
        )
    return np.array(
        [1.0 if pred is ABSTAIN or pred != gold else 0.0
         for pred, gold in zip(predictions, dataset.golds)],
        dtype=np.float64,
    )


def weighted_error(predictions: Sequence[Optional[str]], dataset: WeightedDataset) -> float:
    """
    Share of instance weight carried by misclassified examples.

    The division by the weight total is kept even though weights are
    normally already normalized.

    Returns:
        float: Error in [0, 1]
    """
    wrong = wrong_indicator(predictions, dataset)
    weights = np.asarray(dataset.weights, dtype=np.float64)
    total = weights.sum()
    if not total > 0:
        raise ContractError(f"weights must sum to a positive value, got {total}")
    return float(np.dot(weights, wrong) / total)


def clamp_error(error: float, eps: float = DEFAULT_EPS) -> float:
    return min(max(error, eps), 1.0 - eps)


def learner_weight(error: float, K: int, eps: float = DEFAULT_EPS) -> float:
    """
    Ensemble weight of a learner: log((1 - e) / e) + log(K - 1).

    Args:
        error (float): Weighted error, clamped into [eps, 1 - eps]
        K (int): Number of labels

    Returns:
        float: Learner weight, zero at chance level (K - 1) / K
    """
    if K < 2:
        raise ContractError(f"K must be >= 2, got {K}")
    if not 0.0 < eps < 0.5:
        raise ContractError(f"eps must be in (0, 0.5), got {eps}")
    error = clamp_error(float(error), eps)
    return float(np.log((1.0 - error) / error) + np.log(K - 1))


def reweight_instances(dataset: WeightedDataset, predictions: Sequence[Optional[str]],
                       weight: float) -> WeightedDataset:
    """
    Scale misclassified weights by exp(lambda) and renormalize.

    Returns:
        WeightedDataset: Same examples with weights summing to 1
    """
    if not np.isfinite(weight):
        raise ContractError(f"learner weight must be finite, got {weight}")
    wrong = wrong_indicator(predictions, dataset)
    weights = np.asarray(dataset.weights, dtype=np.float64) * np.exp(weight * wrong)
    total = weights.sum()
    if not np.isfinite(total) or not total > 0:
        raise ContractError(f"reweighting produced an unusable weight total {total}")
    return dataset.with_weights((weights / total).tolist())


def select_error_examples(dataset: WeightedDataset, predictions: Sequence[Optional[str]],
                          m: int) -> ErrorInfo:
    """
    The m heaviest misclassified examples, heaviest first.

    Equal weights keep dataset order.

    Raises:
        Converged: If no example is misclassified
    """
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    wrong = wrong_indicator(predictions, dataset)
    wrong_idx = np.flatnonzero(wrong)
    if wrong_idx.size == 0:
        raise Converged("no misclassified examples")

    weights = np.asarray(dataset.weights, dtype=np.float64)[wrong_idx]
    # stable sort on negated weights keeps the lowest index first among ties
    order = wrong_idx[np.argsort(-weights, kind='stable')][:m]
    entries = []
    for i in order:
        example = dataset.examples[int(i)]
        entries.append(ErrorEntry(example.fields, example.gold, predictions[int(i)]))
    return ErrorInfo(tuple(entries))
