#!/usr/bin/env python3
"""
PREFER Bilateral Prompt Bagging
Stabilizes a single prompt's decision with forward and backward confidence

The forward pass asks how likely each label is correct; when that is
not decisive enough the backward pass asks how likely each label should be
excluded. Both are combined by a softmax over forward minus backward. Majority voting
and a plain single call are kept as drop-in solvers for ablations.
"""

import logging
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.core.llm_provider import CompletionRequest, LLMProvider
from src.core.prefer_templates import (
    ParseError,
    PromptTemplates,
    default_templates,
    parse_confidences,
    parse_label,
)
from src.core.prefer_types import (
    ABSTAIN,
    ConfidenceVector,
    ContractError,
    Example,
    LabelSpace,
    Prompt,
)

logger = logging.getLogger('prefer.bagging')


@dataclass(frozen=True)
class BaggingResult:
    """
    One bilateral decision.

    calls_used counts evaluation passes (1 forward-only, 2 bilateral);
    re-asked passes after a parse failure are counted in retries.
    """

    label: str
    probs: Tuple[float, ...]
    calls_used: int
    confidence: ConfidenceVector
    retries: int = 0


def softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def combine(conf: ConfidenceVector) -> Tuple[Tuple[float, ...], int]:
    """
    Subtractive softmax over forward and backward scores.

    probs = softmax(forward - backward); a missing backward
    side counts as all zeros. Ties go to the lowest label index.

    Returns:
        tuple: (probs, index of the winning label)
    """
    if conf.forward is None:
        raise ContractError("combine needs forward scores")
    forward = np.asarray(conf.forward, dtype=np.float64)
    backward = np.zeros_like(forward) if conf.backward is None else np.asarray(conf.backward, dtype=np.float64)
    probs = softmax(forward - backward)
    return tuple(float(p) for p in probs), int(np.argmax(probs))


def _confidence_pass(prompt: Prompt, example: Example, provider: LLMProvider, label_space: LabelSpace,
                     backward: bool, templates: PromptTemplates, temperature: float,
                     max_tokens: int, seed: Optional[int]) -> Tuple[List[float], int]:
    request = CompletionRequest(
        system_text=templates.system_text,
        user_text=templates.render_confidence(prompt, example, label_space, backward=backward),
        temperature=temperature,
        max_tokens=max_tokens,
        kind='backward' if backward else 'forward',
        example_id=example.id,
        prompt_iteration=prompt.iteration,
        seed=seed,
    )
    try:
        return parse_confidences(provider.complete(request).text, label_space), 0
    except ParseError as e:
        logger.warning(f"Re-asking {request.kind} confidence for example {example.id}: {e}")
    retry = replace(request, sample_index=1)
    return parse_confidences(provider.complete(retry).text, label_space), 1


def evaluate_forward(prompt: Prompt, example: Example, provider: LLMProvider, label_space: LabelSpace,
                     templates: Optional[PromptTemplates] = None, temperature: float = 0.0,
                     max_tokens: int = 512, seed: Optional[int] = None) -> ConfidenceVector:
    """Confidence that each label is the correct one."""
    scores, _ = _confidence_pass(prompt, example, provider, label_space, False,
                                 templates or default_templates(), temperature, max_tokens, seed)
    return ConfidenceVector(forward=tuple(scores))


def evaluate_backward(prompt: Prompt, example: Example, provider: LLMProvider, label_space: LabelSpace,
                      templates: Optional[PromptTemplates] = None, temperature: float = 0.0,
                      max_tokens: int = 512, seed: Optional[int] = None) -> ConfidenceVector:
    """Confidence that each label should be excluded."""
    scores, _ = _confidence_pass(prompt, example, provider, label_space, True,
                                 templates or default_templates(), temperature, max_tokens, seed)
    return ConfidenceVector(backward=tuple(scores))


def bilateral_predict(prompt: Prompt, example: Example, provider: LLMProvider, label_space: LabelSpace,
                      tau: float = 1.0, templates: Optional[PromptTemplates] = None,
                      temperature: float = 0.0, max_tokens: int = 512,
                      seed: Optional[int] = None) -> BaggingResult:
    """
    Forward pass, then a backward pass when the forward decision is weak.

    The forward-only confidence is the largest softmax of the forward scores. It is decisive
    when it reaches tau, so tau=0 never runs the backward pass and tau=1
    runs it for every finite score listing.

    Args:
        tau (float): Confidence threshold in [0, 1]

    Returns:
        BaggingResult: Label, probabilities and passes used
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must be in [0, 1], got {tau}")
    templates = templates or default_templates()

    forward, retries = _confidence_pass(prompt, example, provider, label_space, False,
                                        templates, temperature, max_tokens, seed)
    conf = ConfidenceVector(forward=tuple(forward))
    if float(softmax(forward).max()) >= tau:
        probs, index = combine(conf)
        return BaggingResult(label_space.labels[index], probs, 1, conf, retries)

    backward, backward_retries = _confidence_pass(prompt, example, provider, label_space, True,
                                                  templates, temperature, max_tokens, seed)
    conf = conf.merged(ConfidenceVector(backward=tuple(backward)))
    probs, index = combine(conf)
    return BaggingResult(label_space.labels[index], probs, 2, conf, retries + backward_retries)


def solve_once(prompt: Prompt, example: Example, provider: LLMProvider, label_space: LabelSpace,
               templates: Optional[PromptTemplates] = None, temperature: float = 0.0,
               max_tokens: int = 512, sample_index: int = 0, seed: Optional[int] = None) -> Optional[str]:
    """One plain solving call; ABSTAIN when no label can be read."""
    templates = templates or default_templates()
    request = CompletionRequest(
        system_text=templates.system_text,
        user_text=templates.render_solving(prompt, example),
        temperature=temperature,
        max_tokens=max_tokens,
        kind='solving',
        sample_index=sample_index,
        example_id=example.id,
        prompt_iteration=prompt.iteration,
        seed=seed,
    )
    return parse_label(provider.complete(request).text, label_space)


def majority_vote(prompt: Prompt, example: Example, provider: LLMProvider, label_space: LabelSpace,
                  n: int = 3, templates: Optional[PromptTemplates] = None, temperature: float = 1.0,
                  max_tokens: int = 512, seed: Optional[int] = None) -> Optional[str]:
    """
    Most frequent label over n sampled solving calls.

    Ties go to the lowest label index; if every sample abstains so does
    the vote.
    """
    if n < 1:
        raise ContractError(f"majority vote needs n >= 1, got {n}")
    votes = Counter()
    for sample_index in range(n):
        label = solve_once(prompt, example, provider, label_space, templates, temperature,
                           max_tokens, sample_index=sample_index, seed=seed)
        if label is not ABSTAIN:
            votes[label] += 1
    if not votes:
        return ABSTAIN
    return max(votes, key=lambda label: (votes[label], -label_space.index(label)))


class Solver(ABC):
    """Turns (prompt, example) into a label; the piece ablations swap out."""

    def __init__(self, provider: LLMProvider, label_space: LabelSpace,
                 templates: Optional[PromptTemplates] = None, temperature: float = 0.0,
                 max_tokens: int = 512):
        self.provider = provider
        self.label_space = label_space
        self.templates = templates or default_templates()
        self.temperature = temperature
        self.max_tokens = max_tokens

    @abstractmethod
    def predict(self, prompt: Prompt, example: Example, seed: Optional[int] = None) -> Optional[str]:
        """Label for one example, or ABSTAIN."""

    def detail(self, prompt: Prompt, example: Example, seed: Optional[int] = None):
        """(label, probs) for inference; solvers without scores return probs=None."""
        return self.predict(prompt, example, seed), None


class BilateralSolver(Solver):

    def __init__(self, provider, label_space, templates=None, tau: float = 1.0, **kwargs):
        super().__init__(provider, label_space, templates, **kwargs)
        self.tau = tau

    def predict(self, prompt, example, seed=None):
        return self.detail(prompt, example, seed)[0]

    def detail(self, prompt, example, seed=None):
        result = bilateral_predict(prompt, example, self.provider, self.label_space, self.tau,
                                   self.templates, self.temperature, self.max_tokens, seed)
        return result.label, result.probs


class SingleCallSolver(Solver):

    def predict(self, prompt, example, seed=None):
        return solve_once(prompt, example, self.provider, self.label_space, self.templates,
                          self.temperature, self.max_tokens, seed=seed)


class VotingSolver(Solver):

    def __init__(self, provider, label_space, templates=None, n: int = 3, **kwargs):
        super().__init__(provider, label_space, templates, **kwargs)
        if n < 1:
            raise ContractError(f"majority vote needs n >= 1, got {n}")
        self.n = n

    def predict(self, prompt, example, seed=None):
        return majority_vote(prompt, example, self.provider, self.label_space, self.n,
                             self.templates, self.temperature, self.max_tokens, seed)


def make_solver(mode: str, provider: LLMProvider, label_space: LabelSpace,
                templates: Optional[PromptTemplates], config) -> Solver:
    """
    Solver used by a training mode.

    Args:
        mode (str): full, no_feedback, single_prompt -> bilateral;
            no_bagging -> single call; voting -> majority vote
        config: PreferConfig supplying tau, vote_n and temperatures
    """
    common = {'max_tokens': config.max_tokens}
    if mode in ('full', 'no_feedback', 'single_prompt'):
        return BilateralSolver(provider, label_space, templates, tau=config.tau,
                               temperature=config.solve_temperature, **common)
    if mode == 'no_bagging':
        return SingleCallSolver(provider, label_space, templates,
                                temperature=config.solve_temperature, **common)
    if mode == 'voting':
        return VotingSolver(provider, label_space, templates, n=config.vote_n,
                            temperature=config.vote_temperature, **common)
    raise ContractError(f"unknown mode '{mode}'")


def _predict_or_abstain(solver: Solver, prompt: Prompt, example: Example, seed: Optional[int]):
    try:
        return solver.detail(prompt, example, seed)
    except ParseError as e:
        logger.warning(f"Example {example.id} abstains under prompt {prompt.id}: {e}")
        return ABSTAIN, None


def predict_all(solver: Solver, prompt: Prompt, examples: Sequence[Example], n_jobs: int = 1,
                seed: Optional[int] = None, with_probs: bool = False) -> List:
    """
    Run a solver over many examples concurrently.

    Results follow the order of `examples`. Unparseable answers abstain;
    provider failures propagate.

    Returns:
        list: Labels, or (label, probs) pairs when with_probs is set
    """
    results = Parallel(n_jobs=n_jobs, backend='threading')(
        delayed(_predict_or_abstain)(solver, prompt, example, seed) for example in examples
    )
    if with_probs:
        return list(results)
    return [label for label, _ in results]
