"""
Tests for prompt rendering and answer parsing
"""

import random
import string

import pytest

from src.core.prefer_templates import (
    ErrorEntry,
    ErrorInfo,
    ParseError,
    PromptTemplates,
    TemplateError,
    parse_confidences,
    parse_label,
    parse_new_instruction,
    parse_reflections,
    render_feedback,
    render_refine,
    render_solving,
    wrap_reasons,
)
from src.core.prefer_types import ContractError, Example, LabelSpace, Prompt, Reflection


@pytest.fixture
def example():
    return Example('x1', {'text1': 'Who wrote Hamlet?', 'text2': 'Shakespeare wrote Hamlet.'}, 'Yes')


def test_solving_prompt_layout(seed_prompt, example):
    text = render_solving(seed_prompt, example)
    sections = [text.index(header) for header in ('# Task', '# Output format', '# Prediction')]
    assert sections == sorted(sections)
    assert seed_prompt.instruction in text
    assert 'Sentence 1: Who wrote Hamlet?' in text
    assert 'Sentence 2: Shakespeare wrote Hamlet.' in text
    assert text.rstrip().endswith('Label:[]')
    assert '# Demonstrations' not in text


def test_solving_prompt_with_demonstrations(example):
    prompt = Prompt('p0', 'Decide.', 'Answer Yes or No.',
                    (({'text1': 'Is it raining?', 'text2': 'It is raining.'}, 'Yes'),))
    text = render_solving(prompt, example)
    demo_at = text.index('# Demonstrations')
    assert demo_at < text.index('# Prediction')
    assert 'Sentence 2: It is raining.\nLabel: Yes' in text
    assert text.count('Label:[]') == 1


def test_missing_placeholder_names_the_field(seed_prompt):
    broken = Example('x2', {'text1': 'Only one sentence.'})
    with pytest.raises(TemplateError, match='text2'):
        render_solving(seed_prompt, broken)


def test_confidence_clauses_list_every_label(seed_prompt, example, yes_no):
    templates = PromptTemplates.load()
    forward = templates.render_confidence(seed_prompt, example, yes_no)
    backward = templates.render_confidence(seed_prompt, example, yes_no, backward=True)
    for text in (forward, backward):
        assert text.startswith(render_solving(seed_prompt, example))
        assert 'Yes: <score>\nNo: <score>' in text
    assert 'NOT the correct one' in backward
    assert 'NOT the correct one' not in forward


def test_feedback_prompt(seed_prompt):
    info = ErrorInfo([ErrorEntry({'text1': 'q', 'text2': 's'}, 'No', 'Yes'),
                      ErrorEntry({'text1': 'q2', 'text2': 's2'}, 'Yes', None)])
    text = render_feedback(seed_prompt, info, 2)
    assert 'Textual Entailment' in text
    assert seed_prompt.instruction in text
    assert 'Give 2 reasons' in text
    assert 'Gold: No  Model answered: Yes' in text
    assert 'Model answered: (no answer)' in text
    with pytest.raises(ContractError):
        render_feedback(seed_prompt, info, 0)
    with pytest.raises(ContractError):
        render_feedback(seed_prompt, ErrorInfo([]), 2)


def test_refine_prompt_lists_reasons(seed_prompt):
    reflection = Reflection(('too vague', 'ignores negation'), 'p0', 0)
    text = render_refine(seed_prompt, reflection)
    assert '1. too vague\n2. ignores negation' in text
    assert seed_prompt.instruction in text


def test_custom_solving_template(tmp_path, seed_prompt):
    path = tmp_path / 'nli.txt'
    path.write_text('# Task\n{instruction}\n\n# Prediction\nPremise: {premise}\nLabel:[]\n', encoding='utf-8')
    templates = PromptTemplates.load(solving_path=path, task_description='NLI')
    text = templates.render_solving(seed_prompt, Example('n1', {'premise': 'A cat sleeps.'}))
    assert 'Premise: A cat sleeps.' in text
    assert templates.task_description == 'NLI'


def test_parse_reflections_extracts_trimmed_segments():
    text = 'Sure.\n<START> first reason <END> noise <START>second\nline<END><START>  <END>'
    reflection = parse_reflections(text, 'p2', 2)
    assert reflection.reasons == ('first reason', 'second\nline')
    assert reflection.source_prompt_id == 'p2'
    with pytest.raises(ParseError):
        parse_reflections('no markers at all')
    assert parse_new_instruction('<START>Be precise.<END><START>extra<END>') == 'Be precise.'


def test_wrapped_reasons_parse_back():
    rng = random.Random(5)
    alphabet = string.ascii_letters + string.digits + ' .,;:!?\n'
    for _ in range(100):
        reasons = []
        for _ in range(rng.randint(1, 5)):
            reason = ''.join(rng.choice(alphabet) for _ in range(rng.randint(1, 40))).strip()
            reasons.append(reason or 'x')
        assert parse_reflections(wrap_reasons(reasons)).reasons == tuple(reasons)


@pytest.mark.parametrize('text, expected', [
    ('Label: yes', 'Yes'),
    ('The answer is NO.', 'No'),
    ('Yes, at first sight.\nLabel: No', 'No'),
    ('Yes or no? I would say no', 'No'),
    ('I cannot tell.', None),
    ('', None),
])
def test_parse_label(text, expected, yes_no):
    assert parse_label(text, yes_no) == expected


@pytest.mark.parametrize('labels', [
    ('Yes', 'No'),
    ('entailment', 'neutral', 'contradiction'),
    ('Not Entailment', 'Entailment'),
    ('hate speech', 'not hate speech'),
])
def test_parse_label_recovers_every_label(labels):
    label_space = LabelSpace(labels)
    for label in labels:
        text = f"The sentences were compared step by step.\nLabel: {label}"
        assert parse_label(text, label_space) == label


def test_parse_label_prefers_longer_overlapping_label():
    labels = LabelSpace(('Entailment', 'Not Entailment'))
    assert parse_label('Label: Not Entailment', labels) == 'Not Entailment'
    assert parse_label('Label: entailment', labels) == 'Entailment'


def test_parse_confidences_clamps_and_orders(yes_no):
    assert parse_confidences('No: 0.25\nYes: 0.75', yes_no) == [0.75, 0.25]
    assert parse_confidences('- **Yes**: 1.7\n- **No**: -0.2', yes_no) == [1.0, 0.0]
    assert parse_confidences('Yes = .5\nNo = 5e-1', yes_no) == [0.5, 0.5]
    with pytest.raises(ParseError, match="'No'"):
        parse_confidences('Yes: 0.9', yes_no)
    with pytest.raises(ParseError):
        parse_confidences('Yes: high\nNo: low', yes_no)


@pytest.mark.parametrize('text, expected', [
    ('Yes: 0.9.\nNo: 0.1.', [0.9, 0.1]),
    ('Yes: 90%\nNo: 10%', [0.9, 0.1]),
    ('Yes: 75 %.\nNo: 0.25', [0.75, 0.25]),
    ('Yes: 1.\nNo: 0', [1.0, 0.0]),
])
def test_parse_confidences_reads_sentence_style_scores(text, expected, yes_no):
    assert parse_confidences(text, yes_no) == pytest.approx(expected)
