"""
Tests for metrics, k-shot sampling and the ablation harness
"""

import json

import numpy as np
import pytest

from conftest import DATA_DIR, make_examples, offline_config
from src.core.llm_provider import ScriptedProvider
from src.core.prefer_types import ContractError, LabelSpace, Prompt, load_examples
from src.ml.prefer_evaluation import (
    accuracy,
    f1_score,
    kshot_sample,
    run_ablation,
    summary_table,
    write_report,
    write_summary_report,
)

TOY_DATASET = DATA_DIR / 'toy_entailment.jsonl'
TOY_TRANSCRIPT = DATA_DIR / 'transcripts' / 'toy_transcript.jsonl'


def _toy_seed():
    return Prompt.from_dict(json.loads((DATA_DIR / 'seed_prompt.json').read_text(encoding='utf-8')))


# ------------------------------------------------------------ metrics


def test_binary_f1(yes_no):
    # one true positive, one false positive, one false negative
    assert f1_score(['Yes', 'Yes', 'No'], ['Yes', 'No', 'Yes'], yes_no) == pytest.approx(0.5)
    assert f1_score(['No', 'No'], ['No', 'No'], yes_no) == 0.0
    assert f1_score(['No', 'No'], ['No', 'No'], yes_no, positive='no') == pytest.approx(1.0)


def test_macro_f1_counts_abstention_as_no_class(yes_no):
    assert f1_score(['Yes', None], ['Yes', 'No'], yes_no, 'macro') == pytest.approx(0.5)
    three = LabelSpace(('A', 'B', 'C'))
    assert f1_score(['A', 'B', 'C'], ['A', 'B', 'C'], three, 'macro') == pytest.approx(1.0)
    assert f1_score([None, None], ['Yes', 'No'], yes_no, 'macro') == 0.0


def test_f1_ignores_example_order(yes_no):
    rng = np.random.default_rng(17)
    three = LabelSpace(('A', 'B', 'C'))
    for label_space in (yes_no, three) * 20:
        size = int(rng.integers(2, 12))
        choices = list(label_space.labels) + [None]
        predictions = [choices[i] for i in rng.integers(len(choices), size=size)]
        golds = [label_space.labels[i] for i in rng.integers(len(label_space.labels), size=size)]
        order = rng.permutation(size)
        shuffled_predictions = [predictions[i] for i in order]
        shuffled_golds = [golds[i] for i in order]
        for averaging in ('binary', 'macro'):
            assert f1_score(shuffled_predictions, shuffled_golds, label_space, averaging) == \
                pytest.approx(f1_score(predictions, golds, label_space, averaging), abs=1e-12)


def test_metric_contracts(yes_no):
    with pytest.raises(ContractError):
        f1_score([], [], yes_no)
    with pytest.raises(ContractError):
        f1_score(['Yes'], ['Yes', 'No'], yes_no)
    with pytest.raises(ContractError):
        f1_score(['Yes'], [None], yes_no)
    with pytest.raises(ContractError):
        f1_score(['Yes'], ['Yes'], yes_no, averaging='micro')
    with pytest.raises(ContractError):
        f1_score(['Yes'], ['Yes'], yes_no, positive='Maybe')


def test_accuracy():
    assert accuracy(['Yes', None, 'No', 'No'], ['Yes', 'No', 'No', 'Yes']) == pytest.approx(0.5)


def test_kshot_sample_is_seeded():
    examples = make_examples(['Yes', 'No'] * 20)
    first = kshot_sample(examples, 10, seed=4)
    again = kshot_sample(examples, 10, seed=4)
    assert first == again
    assert len(first) == 10
    assert len({example.id for example in first.examples}) == 10
    assert first.weights == tuple([0.1] * 10)
    assert {e.id for e in kshot_sample(examples, 40, seed=1).examples} == {e.id for e in examples}
    with pytest.raises(ContractError):
        kshot_sample(examples, 41)
    with pytest.raises(ContractError):
        kshot_sample(examples, 0)


# ------------------------------------------------------------ ablations


def test_full_ablation_on_toy_transcript():
    examples = load_examples(TOY_DATASET)
    provider = ScriptedProvider.from_transcript(TOY_TRANSCRIPT)
    report = run_ablation('full', _toy_seed(), examples, provider, offline_config(iterations=3, k=10))

    assert report.calls_per_step == [22, 22, 22]
    assert report.total_calls == 66
    # the seed prompt misses one Yes and one No: F1 = 2 * 4 / (2 * 4 + 1 + 1)
    assert report.curve[0] == pytest.approx(0.8)
    assert report.f1 == pytest.approx(1.0)
    assert [record['f1'] for record in report.records] == report.curve
    assert {'mode', 'iteration', 'prompt_id', 'error', 'lambda', 'admitted', 'f1', 'calls',
            'elapsed_seconds'} <= set(report.records[0])


@pytest.mark.parametrize('mode, calls', [('full', 102), ('no_bagging', 52), ('voting', 152)])
def test_ablation_training_cost(mode, calls, seed_prompt, weak_classifier_factory):
    examples = make_examples(['Yes', 'No'] * 25)
    provider = weak_classifier_factory(examples, ['e10'])
    report = run_ablation(mode, seed_prompt, examples, provider, offline_config(iterations=1))
    assert report.calls_per_step == [calls]
    assert report.ensemble.mode == mode
    # one of 25 positives missed: F1 = 48 / 49
    assert report.f1 == pytest.approx(48 / 49)


def test_single_prompt_ablation_scores_the_seed(seed_prompt, four_examples, weak_classifier_factory):
    provider = weak_classifier_factory(four_examples, ['e00', 'e01', 'e02'])
    report = run_ablation('single_prompt', seed_prompt, four_examples, provider, offline_config())
    assert len(report.ensemble) == 0
    assert report.records[0]['admitted'] is False
    assert report.records[0]['f1'] is None
    # predictions No, Yes, No, No against Yes, No, Yes, No
    assert report.f1 == 0.0


def test_unknown_ablation_mode(seed_prompt, four_examples):
    with pytest.raises(ContractError):
        run_ablation('boosting', seed_prompt, four_examples, ScriptedProvider([]), offline_config())


def test_reports_are_written(tmp_path, seed_prompt, four_examples, weak_classifier_factory):
    reports = []
    for mode in ('full', 'no_bagging'):
        provider = weak_classifier_factory(four_examples, ['e01'], ['e02'])
        reports.append(run_ablation(mode, seed_prompt, four_examples, provider, offline_config(iterations=2)))

    path = write_report(tmp_path / 'ablation_report.jsonl', reports)
    records = [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines()]
    assert [(record['mode'], record['iteration']) for record in records] == [
        ('full', 0), ('full', 1), ('no_bagging', 0), ('no_bagging', 1),
    ]

    table = summary_table(reports)
    assert table['mode'].tolist() == ['full', 'no_bagging']
    assert table['total_calls'].tolist() == [2 * (8 + 2), 2 * (4 + 2)]

    text = write_summary_report(tmp_path / 'summary.txt', reports)
    assert 'PREFER ABLATION SUMMARY' in text
    assert 'FULL F1 BY ENSEMBLE SIZE:' in text
    assert (tmp_path / 'summary.txt').read_text(encoding='utf-8').startswith('=' * 50)
