#!/usr/bin/env python3
"""
PREFER Evaluation Harness
F1 and accuracy, k-shot sampling, per-iteration curves and ablations
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import accuracy_score
from sklearn.metrics import f1_score as sk_f1_score

from src.core.llm_provider import LLMProvider
from src.core.prefer_booster import PreferBooster
from src.core.prefer_data_logger import PreferDataLogger
from src.core.prefer_templates import PromptTemplates
from src.core.prefer_types import (
    ABSTAIN,
    ContractError,
    Ensemble,
    Example,
    LabelSpace,
    Prompt,
    WeightedDataset,
)
from src.ml.prefer_bagging import Solver, make_solver, predict_all
from src.ml.prefer_inference import LearnerVote, learner_vote, tally
from src.utils.prefer_config import MODES, PreferConfig

logger = logging.getLogger('prefer.evaluation')

# Stands in for an abstention so it never matches any class
ABSTAIN_SENTINEL = '\x00abstain'


def _check_aligned(predictions: Sequence[Optional[str]], golds: Sequence[Optional[str]]):
    if not len(predictions) or not len(golds):
        raise ContractError("cannot score empty predictions")
    if len(predictions) != len(golds):
        raise ContractError(f"{len(predictions)} predictions for {len(golds)} gold labels")
    if any(gold is None for gold in golds):
        raise ContractError("every scored example needs a gold label")


def f1_score(predictions: Sequence[Optional[str]], golds: Sequence[str], label_space: LabelSpace,
             averaging: str = 'binary', positive: Optional[str] = None) -> float:
    """
    F1 over label predictions.

    Args:
        averaging (str): 'binary' scores the positive label only, 'macro'
            averages per-class F1 over all K labels
        positive (str): Positive label for binary averaging (first label by default)

    Returns:
        float: F1 in [0, 1]; abstentions never count as any class
    """
    _check_aligned(predictions, golds)
    y_pred = [ABSTAIN_SENTINEL if pred is ABSTAIN else pred for pred in predictions]
    y_true = list(golds)
    if averaging == 'binary':
        positive = label_space.canonical(positive) if positive else label_space.labels[0]
        if positive is None:
            raise ContractError("binary F1 needs a positive label from the label space")
        scores = sk_f1_score(y_true, y_pred, labels=[positive], average=None, zero_division=0)
        return float(scores[0])
    if averaging == 'macro':
        return float(sk_f1_score(y_true, y_pred, labels=list(label_space.labels),
                                 average='macro', zero_division=0))
    raise ContractError(f"averaging must be 'binary' or 'macro', got '{averaging}'")


def accuracy(predictions: Sequence[Optional[str]], golds: Sequence[str]) -> float:
    _check_aligned(predictions, golds)
    y_pred = [ABSTAIN_SENTINEL if pred is ABSTAIN else pred for pred in predictions]
    return float(accuracy_score(list(golds), y_pred))


def kshot_sample(examples: Sequence[Example], k: int = 50, seed: int = 0) -> WeightedDataset:
    """
    Draw k examples without replacement, uniformly weighted.

    The same seed always yields the same sample in the same order.
    """
    examples = list(examples)
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if k > len(examples):
        raise ContractError(f"cannot sample k={k} from {len(examples)} examples")
    order = np.random.default_rng(seed).permutation(len(examples))[:k]
    return WeightedDataset.uniform([examples[int(i)] for i in order])


def learner_votes(ensemble: Ensemble, examples: Sequence[Example], solver: Solver,
                  n_jobs: int = 1) -> List[List[LearnerVote]]:
    """Every learner's vote on every example, indexed [learner][example]."""
    return [
        list(Parallel(n_jobs=n_jobs, backend='threading')(
            delayed(learner_vote)(solver, learner, example, ensemble.seed) for example in examples
        ))
        for learner in ensemble.learners
    ]


def prefix_predictions(ensemble: Ensemble, votes: List[List[LearnerVote]], size: int,
                       mode: str = 'weighted_vote') -> List[Optional[str]]:
    """Ensemble predictions using only the first `size` learners."""
    prefix = Ensemble(ensemble.learners[:size], ensemble.label_space, ensemble.seed,
                      ensemble.config_digest, ensemble.tau, ensemble.mode)
    n_examples = len(votes[0]) if votes else 0
    return [tally(prefix, [votes[t][i] for t in range(size)], mode) for i in range(n_examples)]


def prefix_curve(ensemble: Ensemble, votes: List[List[LearnerVote]], golds: Sequence[str],
                 averaging: str = 'binary', positive: Optional[str] = None,
                 mode: str = 'weighted_vote') -> List[float]:
    """F1 of learners 1..t for every t, from one cached set of votes."""
    return [
        f1_score(prefix_predictions(ensemble, votes, size, mode), golds, ensemble.label_space,
                 averaging, positive)
        for size in range(1, len(ensemble) + 1)
    ]


@dataclass
class AblationReport:
    """Training and evaluation outcome of one ablation mode."""

    mode: str
    records: List[Dict[str, Any]]
    ensemble: Ensemble
    f1: Optional[float]
    calls_per_step: List[int]
    curve: List[float] = field(default_factory=list)

    @property
    def total_calls(self) -> int:
        return int(sum(self.calls_per_step))


def run_ablation(mode: str, seed_prompt: Prompt, dataset, provider: LLMProvider,
                 config: Optional[PreferConfig] = None, eval_examples: Optional[Sequence[Example]] = None,
                 templates: Optional[PromptTemplates] = None, checkpoint_dir=None,
                 data_logger: Optional[PreferDataLogger] = None) -> AblationReport:
    """
    Train one ablation variant and score it.

    Modes differ from full training only in the swapped component:
    no_feedback rewrites the prompt without error information,
    no_bagging solves with one plain call, voting uses a majority vote
    and single_prompt scores the seed prompt alone.

    Args:
        dataset: Training examples (or a WeightedDataset)
        eval_examples: Labeled examples to score; the training set when None

    Returns:
        AblationReport: Per-step records, final F1 and call counts
    """
    if mode not in MODES:
        raise ContractError(f"ablation mode must be one of {list(MODES)}, got '{mode}'")
    config = (config or PreferConfig()).merged({'mode': mode})
    booster = PreferBooster(provider, config, templates, data_logger=data_logger)
    examples = dataset.examples if isinstance(dataset, WeightedDataset) else tuple(dataset)
    ensemble = booster.train(seed_prompt, examples, checkpoint_dir)

    if eval_examples is None:
        logger.info(f"No evaluation split for {mode}; scoring the training examples")
    eval_examples = list(eval_examples) if eval_examples is not None else list(examples)
    golds = [example.gold for example in eval_examples]
    averaging = config.metric_averaging()
    positive = config.positive()
    solver = make_solver(mode, provider, config.label_space, booster.templates, config)

    curve: List[float] = []
    f1 = None
    if len(ensemble):
        votes = learner_votes(ensemble, eval_examples, solver, config.n_jobs)
        curve = prefix_curve(ensemble, votes, golds, averaging, positive, config.inference_mode)
        f1 = curve[-1]
    elif mode == 'single_prompt':
        predictions = predict_all(solver, seed_prompt, eval_examples, config.n_jobs)
        f1 = f1_score(predictions, golds, config.label_space, averaging, positive)

    records = []
    admitted = 0
    for step in booster.history:
        admitted += int(step.admitted)
        records.append({
            'mode': mode,
            'iteration': step.iteration,
            'prompt_id': step.prompt_id,
            'error': step.error,
            'lambda': step.weight,
            'admitted': step.admitted,
            'f1': curve[admitted - 1] if admitted and admitted <= len(curve) else None,
            'calls': step.calls,
            'elapsed_seconds': round(step.elapsed_seconds, 4),
        })
    report = AblationReport(mode, records, ensemble, f1, [step.calls for step in booster.history], curve)
    logger.info(f"Ablation {mode}: F1 {f1}, {report.total_calls} training calls, {len(ensemble)} learners")
    return report


def write_report(path, reports: Sequence[AblationReport]) -> Path:
    """Line-delimited {mode, iteration, error, lambda, f1, calls} records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for report in reports:
            for record in report.records:
                f.write(json.dumps(record, sort_keys=True) + '\n')
    return path


def summary_table(reports: Sequence[AblationReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        rows.append({
            'mode': report.mode,
            'learners': len(report.ensemble),
            'f1': report.f1,
            'steps': len(report.calls_per_step),
            'calls_per_step': float(np.mean(report.calls_per_step)) if report.calls_per_step else 0.0,
            'total_calls': report.total_calls,
            'final_error': report.records[-1]['error'] if report.records else None,
        })
    return pd.DataFrame(rows, columns=['mode', 'learners', 'f1', 'steps', 'calls_per_step',
                                       'total_calls', 'final_error'])


def write_summary_report(path, reports: Sequence[AblationReport]) -> str:
    """Human-readable ablation summary; returns the text written."""
    table = summary_table(reports)
    report = []
    report.append("=" * 50)
    report.append("PREFER ABLATION SUMMARY")
    report.append("=" * 50)
    report.append(f"Analysis Date: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    report.append(f"Modes: {', '.join(table['mode'])}")
    report.append("")
    report.append(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    report.append("")

    for item in reports:
        if item.curve:
            report.append(f"{item.mode.upper()} F1 BY ENSEMBLE SIZE:")
            for size, value in enumerate(item.curve, start=1):
                report.append(f"  {size} learner(s): {value:.4f}")
            report.append("")

    report_text = "\n".join(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(report_text + '\n')
    return report_text
