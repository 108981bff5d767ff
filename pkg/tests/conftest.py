"""
Shared fixtures for the PREFER test suite
Everything runs offline against scripted providers
"""

from pathlib import Path

import pytest

from src.core.llm_provider import ScriptedWeakClassifier
from src.core.prefer_types import Example, LabelSpace, Prompt
from src.utils.prefer_config import PreferConfig

REPO_ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = REPO_ROOT / 'data'

SEED_INSTRUCTION = ('Given two sentences, determine whether sentence 2 provides an answer '
                    'to the question posed by sentence 1.')


def make_examples(golds, prefix='e'):
    """Examples with distinct text fields and the given gold labels."""
    return [
        Example(
            id=f"{prefix}{i:02d}",
            fields={'text1': f"Question number {i} about topic {i}?",
                    'text2': f"Statement number {i} on topic {i}."},
            gold=gold,
        )
        for i, gold in enumerate(golds)
    ]


def accuracy_map(examples, wrong_ids=()):
    wrong_ids = set(wrong_ids)
    return {example.id: example.id not in wrong_ids for example in examples}


def offline_config(**overrides):
    """Config for in-process runs: no log file, no thread pool."""
    values = {'log_enabled': False, 'n_jobs': 1}
    values.update(overrides)
    return PreferConfig(**values)


@pytest.fixture
def yes_no():
    return LabelSpace(('Yes', 'No'))


@pytest.fixture
def seed_prompt():
    return Prompt(
        id='p0',
        instruction=SEED_INSTRUCTION,
        output_format='Explain your reasoning process in one sentence and Answer "Yes" or "No" as the label.',
    )


@pytest.fixture
def four_examples():
    return make_examples(['Yes', 'No', 'Yes', 'No'])


@pytest.fixture
def weak_classifier_factory(yes_no):
    """Build a scripted weak learner from per-iteration lists of wrong example ids."""

    def factory(examples, *wrong_per_iteration, label_space=None, **kwargs):
        schedule = [accuracy_map(examples, wrong) for wrong in (wrong_per_iteration or [()])]
        return ScriptedWeakClassifier(schedule, examples, label_space or yes_no, **kwargs)

    return factory
