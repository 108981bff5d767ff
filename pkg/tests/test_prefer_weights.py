"""
Tests for the boosting weight math
"""

import math

import numpy as np
import pytest

from conftest import make_examples
from src.core.prefer_types import ContractError, WeightedDataset
from src.ml.prefer_weights import (
    Converged,
    learner_weight,
    reweight_instances,
    select_error_examples,
    weighted_error,
    wrong_indicator,
)


@pytest.fixture
def dataset():
    return WeightedDataset.uniform(make_examples(['Yes', 'No', 'Yes', 'No']))


def test_learner_weight_spot_values():
    assert learner_weight(0.25, 2) == pytest.approx(math.log(3), abs=1e-12)
    assert learner_weight(0.5, 2) == pytest.approx(0.0, abs=1e-12)
    # chance level for K labels is (K - 1) / K
    assert learner_weight(2 / 3, 3) == pytest.approx(0.0, abs=1e-12)
    assert learner_weight(0.25, 3) == pytest.approx(math.log(3) + math.log(2), abs=1e-12)
    assert learner_weight(0.2, 4) == pytest.approx(math.log(4) + math.log(3), abs=1e-12)
    assert learner_weight(0.0, 2) == pytest.approx(math.log((1 - 1e-6) / 1e-6), abs=1e-9)
    assert learner_weight(1.0, 2) == pytest.approx(-math.log((1 - 1e-6) / 1e-6), abs=1e-9)


def test_learner_weight_matches_closed_form():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        error = float(rng.random())
        K = int(rng.integers(2, 11))
        clamped = min(max(error, 1e-6), 1 - 1e-6)
        expected = math.log((1 - clamped) / clamped) + math.log(K - 1)
        assert learner_weight(error, K) == pytest.approx(expected, abs=1e-9)
        assert (learner_weight(error, K) > 0) == (clamped < (K - 1) / K)


def test_learner_weight_rejects_bad_arguments():
    with pytest.raises(ContractError):
        learner_weight(0.3, 1)
    with pytest.raises(ContractError):
        learner_weight(0.3, 2, eps=0.0)
    with pytest.raises(ContractError):
        learner_weight(0.3, 2, eps=0.5)


def test_weighted_error(dataset):
    assert weighted_error(['Yes', 'No', 'No', 'No'], dataset) == pytest.approx(0.25)
    assert weighted_error(['Yes', None, 'Yes', 'No'], dataset) == pytest.approx(0.25)
    unnormalized = dataset.with_weights((1.0, 2.0, 3.0, 4.0))
    assert weighted_error(['Yes', 'No', 'Yes', 'Yes'], unnormalized) == pytest.approx(0.4)
    with pytest.raises(ContractError):
        weighted_error(['Yes'], dataset)


def test_abstentions_count_as_wrong(dataset):
    assert wrong_indicator([None, 'No', 'Yes', None], dataset).tolist() == [1.0, 0.0, 0.0, 1.0]


def test_reweight_boosts_misclassified_examples(dataset):
    reweighted = reweight_instances(dataset, ['Yes', 'No', 'No', 'No'], math.log(3))
    assert reweighted.weights == pytest.approx((1 / 6, 1 / 6, 1 / 2, 1 / 6), abs=1e-12)
    assert sum(reweighted.weights) == pytest.approx(1.0, abs=1e-12)
    assert reweighted.examples == dataset.examples
    with pytest.raises(ContractError):
        reweight_instances(dataset, ['Yes', 'No', 'No', 'No'], float('inf'))


def test_reweighted_error_is_chance_level():
    # after an update the same predictions sit exactly at chance level
    rng = np.random.default_rng(2)
    examples = make_examples(['Yes', 'No'] * 10)
    labels = ['Yes', 'No']
    for _ in range(50):
        data = WeightedDataset(tuple(examples), tuple(rng.random(20) + 0.01)).normalized()
        predictions = [labels[int(i)] for i in rng.integers(0, 2, 20)]
        error = weighted_error(predictions, data)
        if not 0.0 < error < 0.5:
            continue
        after = reweight_instances(data, predictions, learner_weight(error, 2))
        assert weighted_error(predictions, after) == pytest.approx(0.5, abs=1e-9)


def test_select_error_examples_heaviest_first():
    examples = make_examples(['Yes', 'No', 'Yes', 'No'])
    data = WeightedDataset(tuple(examples), (0.1, 0.4, 0.2, 0.3))
    predictions = ['No', 'No', 'No', 'Yes']
    info = select_error_examples(data, predictions, 2)
    assert [entry.fields for entry in info.entries] == [examples[3].fields, examples[2].fields]
    assert [(entry.gold, entry.answer) for entry in info.entries] == [('No', 'Yes'), ('Yes', 'No')]
    assert len(select_error_examples(data, predictions, 10)) == 3


def test_select_error_examples_ties_keep_dataset_order(dataset):
    info = select_error_examples(dataset, [None, 'Yes', 'No', 'Yes'], 3)
    assert [entry.gold for entry in info.entries] == ['Yes', 'No', 'Yes']
    assert info.entries[0].answer is None


def test_select_error_examples_converged(dataset):
    with pytest.raises(Converged):
        select_error_examples(dataset, ['Yes', 'No', 'Yes', 'No'], 4)
    with pytest.raises(ContractError):
        select_error_examples(dataset, ['No', 'No', 'Yes', 'No'], 0)
