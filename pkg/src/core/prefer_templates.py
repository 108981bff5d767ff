#!/usr/bin/env python3
"""
PREFER Prompt Templates
Part of the PREFER prompt ensemble engine

Renders the solving, confidence, feedback, refine and rewrite prompts from
the text templates in config/templates, and parses labels, confidence
listings, reflections and new instructions back out of model answers.
"""

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from string import Formatter
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from src.core.prefer_types import (
    ABSTAIN,
    ContractError,
    Example,
    LabelSpace,
    PreferError,
    Prompt,
    Reflection,
)

TEMPLATE_DIR = Path(__file__).resolve().parents[2] / 'config' / 'templates'

START_MARKER = '<START>'
END_MARKER = '<END>'
PREDICTION_HEADER = '# Prediction\n'
LABEL_SLOT = 'Label:[]'

_SEGMENT = re.compile(re.escape(START_MARKER) + r'(.*?)' + re.escape(END_MARKER), re.DOTALL)
_NUMBER = r'([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)'


class TemplateError(PreferError):
    """A template could not be filled."""


class ParseError(PreferError):
    """A model answer did not contain the expected structure."""


@dataclass(frozen=True)
class ErrorEntry:
    fields: Mapping[str, str]
    gold: str
    answer: Optional[str]


@dataclass(frozen=True)
class ErrorInfo:
    """Misclassified examples shown to the model in the feedback prompt."""

    entries: Tuple[ErrorEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, 'entries', tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)


class PromptTemplate:
    """Text with {placeholder} slots; no conditionals or loops."""

    def __init__(self, template: str, name: str = 'template'):
        self.template = template
        self.name = name

    @classmethod
    def from_file(cls, path) -> 'PromptTemplate':
        path = Path(path)
        with open(path, 'r', encoding='utf-8') as f:
            return cls(f.read().rstrip('\n'), name=path.stem)

    def get_fields(self) -> List[str]:
        return [
            field_name
            for _, field_name, _, _ in Formatter().parse(self.template)
            if field_name is not None
        ]

    def render(self, values: Mapping[str, str]) -> str:
        for field_name in self.get_fields():
            if field_name not in values:
                raise TemplateError(f"{self.name}: missing value for placeholder '{field_name}'")
        return self.template.format_map(dict(values))


class SolvingTemplate(PromptTemplate):
    """
    Solving prompt: task, output format, optional demonstrations, prediction.

    Demonstrations reuse the prediction section with the label filled in, so
    they always look like the question the model is asked.
    """

    def prediction_section(self) -> Optional[PromptTemplate]:
        if PREDICTION_HEADER not in self.template:
            return None
        return PromptTemplate(self.template.split(PREDICTION_HEADER, 1)[1], name=self.name)

    def render_prompt(self, prompt: Prompt, example: Example) -> str:
        values: Dict[str, str] = dict(example.fields)
        values['instruction'] = prompt.instruction
        values['output_format'] = prompt.output_format
        text = self.render(values)
        if not prompt.demonstrations:
            return text

        section = self.prediction_section()
        if section is None:
            raise TemplateError(f"{self.name}: demonstrations need a '# Prediction' section")
        shots = []
        for fields, label in prompt.demonstrations:
            shots.append(section.render(fields).replace(LABEL_SLOT, f"Label: {label}"))
        demo_block = '# Demonstrations\n' + '\n\n'.join(shots) + '\n\n'
        head, tail = text.split(PREDICTION_HEADER, 1)
        return head + demo_block + PREDICTION_HEADER + tail


class PromptTemplates:
    """The full set of templates one task runs with."""

    def __init__(self, solving: SolvingTemplate, feedback: PromptTemplate, refine: PromptTemplate,
                 rewrite: PromptTemplate, forward_clause: PromptTemplate,
                 backward_clause: PromptTemplate, system_text: str,
                 task_description: str = 'Textual Entailment'):
        self.solving = solving
        self.feedback = feedback
        self.refine = refine
        self.rewrite = rewrite
        self.forward_clause = forward_clause
        self.backward_clause = backward_clause
        self.system_text = system_text
        self.task_description = task_description

    @classmethod
    def load(cls, directory=None, solving_path=None,
             task_description: str = 'Textual Entailment') -> 'PromptTemplates':
        """
        Load templates from a directory.

        Args:
            directory: Folder with the *.txt templates (defaults to config/templates)
            solving_path: Task-specific solving template overriding solving.txt
            task_description (str): Task name used in feedback and refine prompts

        Returns:
            PromptTemplates: Loaded template set
        """
        directory = Path(directory) if directory else TEMPLATE_DIR
        solving_file = Path(solving_path) if solving_path else directory / 'solving.txt'
        with open(solving_file, 'r', encoding='utf-8') as f:
            solving = SolvingTemplate(f.read().rstrip('\n'), name=solving_file.stem)
        with open(directory / 'system.txt', 'r', encoding='utf-8') as f:
            system_text = f.read().strip()
        return cls(
            solving=solving,
            feedback=PromptTemplate.from_file(directory / 'feedback.txt'),
            refine=PromptTemplate.from_file(directory / 'refine.txt'),
            rewrite=PromptTemplate.from_file(directory / 'rewrite.txt'),
            forward_clause=PromptTemplate.from_file(directory / 'forward_clause.txt'),
            backward_clause=PromptTemplate.from_file(directory / 'backward_clause.txt'),
            system_text=system_text,
            task_description=task_description,
        )

    def render_solving(self, prompt: Prompt, example: Example) -> str:
        return self.solving.render_prompt(prompt, example)

    def render_confidence(self, prompt: Prompt, example: Example, label_space: LabelSpace,
                          backward: bool = False) -> str:
        """Solving prompt followed by the forward or backward confidence clause."""
        clause = self.backward_clause if backward else self.forward_clause
        label_lines = '\n'.join(f"{label}: <score>" for label in label_space.labels)
        return self.render_solving(prompt, example) + '\n\n' + clause.render({'label_lines': label_lines})

    def render_feedback(self, prompt: Prompt, error_info: ErrorInfo, num_feedbacks: int) -> str:
        if num_feedbacks < 1:
            raise ContractError(f"num_feedbacks must be >= 1, got {num_feedbacks}")
        if not len(error_info):
            raise ContractError("feedback needs at least one wrong example")
        return self.feedback.render({
            'task_description': self.task_description,
            'prompt': prompt.instruction,
            'error_info': format_error_info(error_info),
            'num_feedbacks': str(num_feedbacks),
        })

    def render_refine(self, prompt: Prompt, reflection: Reflection) -> str:
        if not reflection.reasons:
            raise ContractError("refine needs a reflection with at least one reason")
        reasons = '\n'.join(f"{i}. {reason}" for i, reason in enumerate(reflection.reasons, start=1))
        return self.refine.render({
            'task_description': self.task_description,
            'prompt': prompt.instruction,
            'reasons': reasons,
        })

    def render_rewrite(self, prompt: Prompt) -> str:
        return self.rewrite.render({'prompt': prompt.instruction})


@lru_cache(maxsize=1)
def default_templates() -> PromptTemplates:
    return PromptTemplates.load()


def format_error_info(error_info: ErrorInfo) -> str:
    blocks = []
    for entry in error_info.entries:
        inputs = '; '.join(f"{name}: {value}" for name, value in entry.fields.items())
        answer = entry.answer if entry.answer is not ABSTAIN else '(no answer)'
        blocks.append(f"Input: {inputs}  Gold: {entry.gold}  Model answered: {answer}")
    return '\n' + '\n'.join(blocks)


def render_solving(prompt: Prompt, example: Example, templates: Optional[PromptTemplates] = None) -> str:
    return (templates or default_templates()).render_solving(prompt, example)


def render_feedback(prompt: Prompt, error_info: ErrorInfo, num_feedbacks: int,
                    templates: Optional[PromptTemplates] = None) -> str:
    return (templates or default_templates()).render_feedback(prompt, error_info, num_feedbacks)


def render_refine(prompt: Prompt, reflection: Reflection,
                  templates: Optional[PromptTemplates] = None) -> str:
    return (templates or default_templates()).render_refine(prompt, reflection)


def wrap_reasons(reasons: Sequence[str]) -> str:
    return ''.join(f"{START_MARKER}{reason}{END_MARKER}" for reason in reasons)


def parse_reflections(text: str, source_prompt_id: str = '', iteration: int = 0) -> Reflection:
    """
    Extract every <START>...<END> segment, trimmed, in order.

    Raises:
        ParseError: If no non-empty segment is present
    """
    reasons = [segment.strip() for segment in _SEGMENT.findall(text or '')]
    reasons = [reason for reason in reasons if reason]
    if not reasons:
        raise ParseError(f"no <START>/<END> segments in model answer: {(text or '')[:80]!r}")
    return Reflection(tuple(reasons), source_prompt_id, iteration)


def parse_new_instruction(text: str) -> str:
    """First <START>...<END> segment of a refine or rewrite answer."""
    return parse_reflections(text).reasons[0]


def _label_pattern(label: str):
    return re.compile(r'(?<!\w)' + re.escape(label) + r'(?!\w)', re.IGNORECASE)


def parse_label(text: str, label_space: LabelSpace) -> Optional[str]:
    """
    Find the answered label.

    The last line mentioning any label decides; within it the occurrence
    ending last wins, and a longer label beats one it contains.

    Returns:
        str: Canonical label, or ABSTAIN when no label is mentioned
    """
    patterns = [(label, _label_pattern(label)) for label in label_space.labels]
    for line in reversed((text or '').splitlines()):
        hits = []
        for label, pattern in patterns:
            for match in pattern.finditer(line):
                hits.append((match.end(), len(label), label))
        if hits:
            return max(hits)[2]
    return ABSTAIN


def parse_confidences(text: str, label_space: LabelSpace) -> List[float]:
    """
    Read a "label: score" listing into K scores clamped to [0, 1].

    A sentence-ending period after the score is ignored and a percentage
    is read as a fraction ("90%" is 0.9).

    Raises:
        ParseError: If any label has no numeric score
    """
    scores = []
    lines = (text or '').splitlines()
    for label in label_space.labels:
        pattern = re.compile(
            r'^\W*' + re.escape(label) + r'\W*\s*[:=]\s*' + _NUMBER + r'\s*(%)?\.?\s*(?:$|[^\w.%])',
            re.IGNORECASE,
        )
        value = None
        for line in lines:
            match = pattern.match(line.strip())
            if match:
                value = float(match.group(1))
                if match.group(2):
                    value /= 100.0
        if value is None:
            raise ParseError(f"no score for label '{label}' in model answer: {(text or '')[:80]!r}")
        scores.append(min(1.0, max(0.0, value)))
    return scores
