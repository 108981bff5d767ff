#!/usr/bin/env python3
"""
PREFER Ensemble Inference
Weighted decision making over a trained prompt ensemble

Every learner predicts with the solver the ensemble was trained with;
the labels (weighted_vote) or the bilateral probabilities (weighted_score)
are summed with the learner weights and the heaviest label wins.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.core.llm_provider import LLMProvider, ProviderError
from src.core.prefer_templates import ParseError, PromptTemplates, default_templates
from src.core.prefer_types import ABSTAIN, ContractError, Ensemble, Example, WeakLearner
from src.ml.prefer_bagging import BilateralSolver, Solver

logger = logging.getLogger('prefer.inference')

INFERENCE_MODES = ('weighted_vote', 'weighted_score')


@dataclass(frozen=True)
class LearnerVote:
    label: Optional[str]
    probs: Optional[Tuple[float, ...]] = None

    def to_dict(self):
        return {'label': self.label, 'probs': None if self.probs is None else list(self.probs)}


@dataclass(frozen=True)
class InferenceResult:
    label: Optional[str]
    per_learner: Tuple[LearnerVote, ...]

    def to_dict(self):
        return {'label': self.label, 'per_learner': [vote.to_dict() for vote in self.per_learner]}


def tally(ensemble: Ensemble, votes: Sequence[LearnerVote], mode: str = 'weighted_vote') -> Optional[str]:
    """
    Combine per-learner votes into one label.

    weighted_vote sums each learner's weight on its label; weighted_score
    sums weight times probabilities (a learner without probabilities adds
    its weight to its label). Abstaining learners add nothing, and ties go
    to the lowest label index.

    Returns:
        str: Winning label, or ABSTAIN when every learner abstained
    """
    if mode not in INFERENCE_MODES:
        raise ContractError(f"inference mode must be one of {list(INFERENCE_MODES)}, got '{mode}'")
    if len(votes) != len(ensemble.learners):
        raise ContractError(f"{len(votes)} votes for {len(ensemble.learners)} learners")
    label_space = ensemble.label_space
    scores = np.zeros(label_space.K, dtype=np.float64)
    counted = False
    for learner, vote in zip(ensemble.learners, votes):
        if vote.label is ABSTAIN:
            continue
        counted = True
        if mode == 'weighted_score' and vote.probs is not None:
            scores += learner.weight * np.asarray(vote.probs, dtype=np.float64)
        else:
            scores[label_space.index(vote.label)] += learner.weight
    if not counted:
        return ABSTAIN
    return label_space.labels[int(np.argmax(scores))]


def learner_vote(solver: Solver, learner: WeakLearner, example: Example, seed: Optional[int]) -> LearnerVote:
    try:
        label, probs = solver.detail(learner.prompt, example, seed)
    except (ParseError, ProviderError) as e:
        logger.warning(f"Learner {learner.prompt.id} abstains on example {example.id}: {e}")
        return LearnerVote(ABSTAIN)
    return LearnerVote(label, None if probs is None else tuple(probs))


def ensemble_predict(ensemble: Ensemble, example: Example, provider: LLMProvider,
                     mode: str = 'weighted_vote', tau: Optional[float] = None,
                     solver: Optional[Solver] = None, templates: Optional[PromptTemplates] = None,
                     n_jobs: int = 1) -> InferenceResult:
    """
    Predict one example with every learner and combine the votes.

    Args:
        ensemble (Ensemble): Trained, non-empty ensemble
        mode (str): weighted_vote or weighted_score
        tau (float): Bilateral threshold, defaults to the trained one
        solver (Solver): Overrides the bilateral solver
        n_jobs (int): Learners evaluated concurrently

    Returns:
        InferenceResult: Label plus each learner's vote
    """
    if not len(ensemble):
        raise ContractError("ensemble empty")
    solver = solver or BilateralSolver(
        provider, ensemble.label_space, templates or default_templates(),
        tau=ensemble.tau if tau is None else tau,
    )
    votes = Parallel(n_jobs=n_jobs, backend='threading')(
        delayed(learner_vote)(solver, learner, example, ensemble.seed) for learner in ensemble.learners
    )
    return InferenceResult(tally(ensemble, votes, mode), tuple(votes))


def predict_batch(ensemble: Ensemble, examples: Sequence[Example], provider: LLMProvider,
                  output_path=None, mode: str = 'weighted_vote', tau: Optional[float] = None,
                  solver: Optional[Solver] = None, templates: Optional[PromptTemplates] = None,
                  n_jobs: int = 1) -> List[InferenceResult]:
    """
    Predict many examples; optionally write {id, label, per_learner} JSONL.

    Results keep the order of `examples`.
    """
    if not len(ensemble):
        raise ContractError("ensemble empty")
    solver = solver or BilateralSolver(
        provider, ensemble.label_space, templates or default_templates(),
        tau=ensemble.tau if tau is None else tau,
    )
    results = Parallel(n_jobs=n_jobs, backend='threading')(
        delayed(ensemble_predict)(ensemble, example, provider, mode, tau, solver) for example in examples
    )
    if output_path is not None:
        path = Path(output_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for example, result in zip(examples, results):
                record = {'id': example.id, **result.to_dict()}
                f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + '\n')
        logger.info(f"Wrote {len(results)} predictions to {path}")
    return list(results)
