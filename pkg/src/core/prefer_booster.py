#!/usr/bin/env python3
"""
PREFER Booster - Prompt Boosting Training Loop
Part of the PREFER prompt ensemble engine

Main controller for building a prompt ensemble. Each iteration solves the
training set with the current prompt, weights the prompt as a weak
learner, reweights the examples, asks the model why the prompt failed and
has it write the next prompt. State is checkpointed after every iteration
so an interrupted run can resume.
"""

import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from src.core.llm_provider import CompletionRequest, LLMProvider
from src.core.prefer_data_logger import PreferDataLogger
from src.core.prefer_templates import (
    ParseError,
    PromptTemplates,
    parse_new_instruction,
    parse_reflections,
)
from src.core.prefer_types import (
    Ensemble,
    Example,
    PreferError,
    Prompt,
    Reflection,
    WeakLearner,
    WeightedDataset,
    labeled_examples,
    load_examples,
)
from src.ml.prefer_bagging import Solver, make_solver, predict_all
from src.ml.prefer_weights import (
    Converged,
    learner_weight,
    reweight_instances,
    select_error_examples,
    weighted_error,
)
from src.utils.prefer_checkpoint import (
    PROGRESS_FILE,
    Checkpoint,
    CheckpointError,
    CheckpointLock,
    checkpoint_path,
    load_checkpoint,
    save_checkpoint,
    write_reflections,
)
from src.utils.prefer_config import ConfigError, PreferConfig

# sample_index values: 0 first ask, 1 re-ask after a parse failure,
# 2 replacement for a discarded prompt
PARSE_RETRY_SAMPLE = 1
REPLACEMENT_SAMPLE = 2


class StepFailed(PreferError):
    """A boosting step could not produce its next prompt."""


@dataclass(frozen=True)
class StepRecord:
    """One boosting step as seen by curves and oracle tests."""

    iteration: int
    prompt_id: str
    error: float
    weight: float
    weights: Tuple[float, ...]
    calls: int
    admitted: bool
    elapsed_seconds: float


@dataclass(frozen=True)
class StepResult:
    """
    Outcome of one boost_step.

    next_prompt is None when the step converged, was discarded (lambda <= 0)
    or ran in single-prompt mode.
    """

    learner: WeakLearner
    dataset: WeightedDataset
    predictions: Tuple[Optional[str], ...]
    next_prompt: Optional[Prompt] = None
    reflection: Optional[Reflection] = None
    converged: bool = False

    @property
    def admitted(self) -> bool:
        return self.learner.weight > 0


@dataclass
class TrainingState:
    """Mutable loop state; exactly what a checkpoint stores."""

    ensemble: Ensemble
    dataset: WeightedDataset
    next_prompt: Optional[Prompt]
    completed_iterations: int = 0
    counter: int = 0
    calls_total: int = 0
    finished: bool = False
    parent_prompt: Optional[Prompt] = None
    pending_reflection: Optional[Reflection] = None
    dataset_path: str = ''
    config: dict = field(default_factory=dict)


def derive_seed(seed: int, counter: int) -> int:
    """Request seed for the counter-th step of a run."""
    return (seed * 1_000_003 + counter) % (2 ** 31)


class PreferBooster:
    """
    Boosting loop over prompts.

    Owns the provider, config, templates, solver and progress logger for
    one training run. The solver is picked by config.mode, which is how
    the ablation variants swap components.
    """

    def __init__(self, provider: LLMProvider, config: Optional[PreferConfig] = None,
                 templates: Optional[PromptTemplates] = None, solver: Optional[Solver] = None,
                 data_logger: Optional[PreferDataLogger] = None):
        """
        Initialize the booster.

        Args:
            provider (LLMProvider): Backend for every call
            config (PreferConfig): Run settings (defaults when None)
            templates (PromptTemplates): Prompt templates (bundled set when None)
            solver (Solver): Overrides the solver chosen by config.mode
            data_logger (PreferDataLogger): Progress stream; in-memory when None
        """
        self.provider = provider
        self.config = config or PreferConfig()
        self.templates = templates or PromptTemplates.load(
            self.config.template_dir, self.config.solving_template, self.config.task_description
        )
        self.label_space = self.config.label_space
        self.solver = solver or make_solver(
            self.config.mode, provider, self.label_space, self.templates, self.config
        )
        self.data_logger = data_logger or PreferDataLogger(None)
        self.history: List[StepRecord] = []
        self.logger = logging.getLogger('prefer.booster')

    # ----------------------------------------------------------------- step

    def boost_step(self, dataset: WeightedDataset, prompt: Prompt, seed: Optional[int] = None,
                   reflections: Sequence[Reflection] = ()) -> StepResult:
        """
        One boosting iteration for `prompt`.

        Predicts every example, computes error, learner weight and the
        reweighted dataset in that order, then runs feedback and refine
        (or a single rewrite in no_feedback mode) to get the next prompt.

        Args:
            dataset (WeightedDataset): Training set with normalized weights
            prompt (Prompt): Prompt under evaluation
            seed (int): Request seed forwarded to the provider
            reflections: Reflections that produced `prompt`

        Returns:
            StepResult: Learner, reweighted dataset and next prompt

        Raises:
            StepFailed: Feedback or refine answer unparseable after one re-ask
        """
        predictions = tuple(predict_all(self.solver, prompt, dataset.examples, self.config.n_jobs, seed))
        error = weighted_error(predictions, dataset)
        weight = learner_weight(error, self.label_space.K, self.config.eps)
        reweighted = reweight_instances(dataset, predictions, weight)
        learner = WeakLearner(prompt, weight, error, tuple(reflections))
        self.logger.info(f"Prompt {prompt.id}: weighted error {error:.4f}, lambda {weight:.4f}")

        if weight <= 0:
            return StepResult(learner, reweighted, predictions)
        try:
            error_info = select_error_examples(reweighted, predictions, self.config.m)
        except Converged:
            self.logger.info(f"Prompt {prompt.id} classifies every training example correctly")
            return StepResult(learner, reweighted, predictions, converged=True)
        if self.config.mode == 'single_prompt':
            return StepResult(learner, reweighted, predictions)

        if self.config.mode == 'no_feedback':
            instruction = self._ask_instruction('rewrite', self.templates.render_rewrite(prompt), prompt, seed)
            return StepResult(learner, reweighted, predictions, next_prompt=prompt.refined(instruction))

        feedback_text = self.templates.render_feedback(prompt, error_info, self.config.num_feedbacks)
        reflection = self._ask_reflection(feedback_text, prompt, seed)
        refine_text = self.templates.render_refine(prompt, reflection)
        instruction = self._ask_instruction('refine', refine_text, prompt, seed)
        return StepResult(learner, reweighted, predictions,
                          next_prompt=prompt.refined(instruction), reflection=reflection)

    def _request(self, kind: str, text: str, prompt: Prompt, seed: Optional[int],
                 sample_index: int = 0) -> str:
        request = CompletionRequest(
            system_text=self.templates.system_text,
            user_text=text,
            temperature=self.config.feedback_temperature,
            max_tokens=self.config.max_tokens,
            kind=kind,
            sample_index=sample_index,
            prompt_iteration=prompt.iteration,
            seed=seed,
        )
        return self.provider.complete(request).text

    def _ask_reflection(self, text: str, prompt: Prompt, seed: Optional[int]) -> Reflection:
        for sample_index in (0, PARSE_RETRY_SAMPLE):
            answer = self._request('feedback', text, prompt, seed, sample_index)
            try:
                return parse_reflections(answer, prompt.id, prompt.iteration)
            except ParseError as e:
                self.logger.warning(f"Feedback for {prompt.id} unparseable (sample {sample_index}): {e}")
        raise StepFailed(f"no reflections for prompt {prompt.id} after one re-ask")

    def _ask_instruction(self, kind: str, text: str, prompt: Prompt, seed: Optional[int],
                         samples: Sequence[int] = (0, PARSE_RETRY_SAMPLE)) -> str:
        for sample_index in samples:
            answer = self._request(kind, text, prompt, seed, sample_index)
            try:
                return parse_new_instruction(answer)
            except ParseError as e:
                self.logger.warning(f"{kind} answer for {prompt.id} unparseable (sample {sample_index}): {e}")
        raise StepFailed(f"no new instruction from {kind} for prompt {prompt.id}")

    # ----------------------------------------------------------------- loop

    def train(self, seed_prompt: Prompt, examples: Union[Sequence[Example], WeightedDataset],
              checkpoint_dir=None, dataset_path: str = '') -> Ensemble:
        """
        Run the boosting loop from a seed prompt.

        Args:
            seed_prompt (Prompt): First weak learner's prompt, used as is
            examples: Training examples; weights always start uniform
            checkpoint_dir: Directory for checkpoint, progress and reflections
            dataset_path (str): Recorded so resume can reload the examples

        Returns:
            Ensemble: Every admitted learner with its weight and reflections

        Raises:
            ContractError: If a training example lacks a gold label from the label space
            CheckpointError: If checkpoint_dir already holds a run (use resume)
        """
        if isinstance(examples, WeightedDataset):
            examples = examples.examples
        examples = labeled_examples(examples, self.label_space)
        state = TrainingState(
            ensemble=Ensemble((), self.label_space, self.config.seed, self.config.digest(),
                              self.config.tau, self.config.mode),
            dataset=WeightedDataset.uniform(examples),
            next_prompt=seed_prompt,
            dataset_path=str(dataset_path),
            config=self.config.to_dict(),
        )
        self.logger.info(
            f"Training {self.config.mode} ensemble: {len(state.dataset)} examples, "
            f"{self.config.iterations} iterations, tau {self.config.tau}"
        )
        return self._run(state, checkpoint_dir, fresh=True)

    def resume(self, checkpoint_dir, examples: Optional[Sequence[Example]] = None) -> Ensemble:
        """
        Continue a run from its checkpoint directory.

        Raises:
            ConfigError: If the current config digest differs from the checkpoint's
        """
        checkpoint = load_checkpoint(checkpoint_dir)
        digest = self.config.digest()
        if checkpoint.config_digest != digest:
            raise ConfigError(
                f"config digest mismatch: checkpoint {checkpoint.config_digest}, current {digest}"
            )
        if examples is None:
            if not checkpoint.dataset_path:
                raise CheckpointError("checkpoint records no dataset path; pass the examples explicitly")
            examples = load_examples(checkpoint.dataset_path, self.label_space)
        by_id = {example.id: example for example in examples}
        missing = [example_id for example_id in checkpoint.example_ids if example_id not in by_id]
        if missing:
            raise CheckpointError(f"examples missing from the dataset: {missing[:5]}")

        state = TrainingState(
            ensemble=checkpoint.ensemble,
            dataset=WeightedDataset(
                tuple(labeled_examples((by_id[example_id] for example_id in checkpoint.example_ids),
                                       self.label_space)),
                checkpoint.dataset_weights,
            ),
            next_prompt=checkpoint.next_prompt,
            completed_iterations=checkpoint.completed_iterations,
            counter=checkpoint.rng_state.get('counter', 0),
            calls_total=checkpoint.provider_calls_total,
            finished=checkpoint.finished,
            parent_prompt=checkpoint.parent_prompt,
            pending_reflection=checkpoint.pending_reflection,
            dataset_path=checkpoint.dataset_path,
            config=dict(checkpoint.config),
        )
        self.logger.info(
            f"Resuming after {state.completed_iterations} iterations with {len(state.ensemble)} learners"
        )
        return self._run(state, checkpoint_dir)

    def _run(self, state: TrainingState, checkpoint_dir, fresh: bool = False) -> Ensemble:
        if checkpoint_dir is not None and self.data_logger.jsonl_file is None:
            self.data_logger = PreferDataLogger(str(Path(checkpoint_dir) / PROGRESS_FILE))
        lock = CheckpointLock(checkpoint_dir) if checkpoint_dir is not None else nullcontext()
        with lock:
            if fresh and checkpoint_dir is not None:
                if checkpoint_path(checkpoint_dir).exists():
                    raise CheckpointError(
                        f"{checkpoint_dir} already holds a training run; use resume to continue it"
                    )
                # progress left by a run that died before its first checkpoint
                Path(checkpoint_dir, PROGRESS_FILE).unlink(missing_ok=True)
            while not state.finished and state.completed_iterations < self.config.iterations:
                self._iteration(state)
                if state.completed_iterations >= self.config.iterations:
                    state.finished = True
                if checkpoint_dir is not None:
                    save_checkpoint(checkpoint_dir, self.to_checkpoint(state))
            state.finished = True
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, self.to_checkpoint(state))
                write_reflections(checkpoint_dir, state.ensemble)
        self.logger.info(
            f"Training finished: {len(state.ensemble)} learners, {state.calls_total} provider calls"
        )
        return state.ensemble

    def _iteration(self, state: TrainingState):
        iteration = state.completed_iterations
        prompt = state.next_prompt
        reflections = (state.pending_reflection,) if state.pending_reflection else ()

        result = self._timed_step(state, iteration, prompt, reflections)
        if not result.admitted:
            self.logger.warning(
                f"Discarding prompt {prompt.id}: lambda {result.learner.weight:.4f} <= 0"
            )
            replacement = None
            if self.config.mode != 'single_prompt':
                try:
                    replacement = self._replacement_prompt(state, prompt)
                except StepFailed as e:
                    self.logger.error(f"No replacement for discarded prompt {prompt.id}: {e}")
            if replacement is not None:
                result = self._timed_step(state, iteration, replacement, reflections)
            if replacement is None or not result.admitted:
                self.logger.error(f"Iteration {iteration} produced no usable learner; stopping")
                state.completed_iterations += 1
                state.next_prompt = None
                state.finished = True
                return

        state.ensemble = state.ensemble.with_learner(result.learner)
        state.dataset = result.dataset
        state.completed_iterations += 1
        if result.next_prompt is None:
            state.next_prompt = None
            state.finished = True
        else:
            state.parent_prompt = result.learner.prompt
            state.pending_reflection = result.reflection
            state.next_prompt = result.next_prompt

    def _timed_step(self, state: TrainingState, iteration: int, prompt: Prompt,
                    reflections: Sequence[Reflection]) -> StepResult:
        """boost_step with one whole-step retry, metered and logged."""
        start = time.monotonic()
        calls_before = self.provider.call_count()
        seed = derive_seed(self.config.seed, state.counter)
        state.counter += 1
        try:
            try:
                result = self.boost_step(state.dataset, prompt, seed, reflections)
            except StepFailed as e:
                self.logger.warning(f"Step {iteration} failed ({e}); retrying the whole step once")
                result = self.boost_step(state.dataset, prompt, seed, reflections)
        finally:
            calls = self.provider.call_count() - calls_before
            state.calls_total += calls

        elapsed = time.monotonic() - start
        weights = result.dataset.weights if result.admitted else state.dataset.weights
        self.history.append(StepRecord(
            iteration, prompt.id, result.learner.train_error, result.learner.weight,
            tuple(weights), calls, result.admitted, elapsed,
        ))
        event = 'converged' if result.converged else ('step' if result.admitted else 'discarded')
        self.data_logger.log_step(
            iteration=iteration,
            error=result.learner.train_error,
            weight=result.learner.weight,
            calls=calls,
            calls_total=state.calls_total,
            admitted=result.admitted,
            elapsed_seconds=elapsed,
            mode=self.config.mode,
            prompt_id=prompt.id,
            event=event,
        )
        self.logger.info(f"Iteration {iteration} ({prompt.id}): {calls} calls in {elapsed:.2f}s")
        return result

    def _replacement_prompt(self, state: TrainingState, discarded: Prompt) -> Prompt:
        """One extra generation call for a prompt to replace a discarded one."""
        seed = derive_seed(self.config.seed, state.counter)
        parent = state.parent_prompt
        if parent is not None and state.pending_reflection is not None:
            text = self.templates.render_refine(parent, state.pending_reflection)
            kind = 'refine'
        else:
            parent = parent or discarded
            text = self.templates.render_rewrite(parent)
            kind = 'rewrite'
        calls_before = self.provider.call_count()
        try:
            instruction = self._ask_instruction(kind, text, parent, seed, samples=(REPLACEMENT_SAMPLE,))
        finally:
            state.calls_total += self.provider.call_count() - calls_before
        return replace(discarded, id=f"{discarded.id}r", instruction=instruction)

    def to_checkpoint(self, state: TrainingState) -> Checkpoint:
        return Checkpoint(
            ensemble=state.ensemble,
            dataset_weights=state.dataset.weights,
            completed_iterations=state.completed_iterations,
            rng_state={'seed': self.config.seed, 'counter': state.counter},
            provider_calls_total=state.calls_total,
            config_digest=self.config.digest(),
            next_prompt=state.next_prompt,
            finished=state.finished,
            example_ids=tuple(example.id for example in state.dataset.examples),
            dataset_path=state.dataset_path,
            config=state.config,
            parent_prompt=state.parent_prompt,
            pending_reflection=state.pending_reflection,
        )


def boost_step(dataset: WeightedDataset, prompt: Prompt, provider: LLMProvider,
               config: Optional[PreferConfig] = None, **kwargs) -> StepResult:
    """Single boosting step with a throwaway booster."""
    return PreferBooster(provider, config, **kwargs).boost_step(dataset, prompt)


def train(seed_prompt: Prompt, examples, provider: LLMProvider, config: Optional[PreferConfig] = None,
          checkpoint_dir=None, **kwargs) -> Ensemble:
    """Train an ensemble with a fresh booster."""
    return PreferBooster(provider, config, **kwargs).train(seed_prompt, examples, checkpoint_dir)
