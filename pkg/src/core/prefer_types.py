#!/usr/bin/env python3
"""
PREFER Domain Types
Part of the PREFER prompt ensemble engine

Value objects shared by every module: label spaces, examples, weighted
training sets, prompts, reflections, weak learners, ensembles and
confidence vectors. All of them are immutable once built and serialize
to plain dicts for the checkpoint and dataset formats.
"""

import json
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

# Marker for an unparseable model answer. Scored as an error everywhere.
ABSTAIN = None


class PreferError(Exception):
    """Base class for every error raised by the engine."""


class ContractError(PreferError, ValueError):
    """A precondition or type invariant was violated."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered set of K distinct class labels."""

    labels: Tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(label).strip() for label in self.labels)
        if len(labels) < 2:
            raise ContractError(f"label space needs at least 2 labels, got {len(labels)}")
        if any(not label for label in labels):
            raise ContractError("labels must be non-empty strings")
        folded = [label.casefold() for label in labels]
        if len(set(folded)) != len(folded):
            raise ContractError(f"labels must be pairwise distinct: {list(labels)}")
        object.__setattr__(self, 'labels', labels)

    @property
    def K(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        canonical = self.canonical(label)
        if canonical is None:
            raise ContractError(f"'{label}' is not in the label space {list(self.labels)}")
        return self.labels.index(canonical)

    def canonical(self, text: Optional[str]) -> Optional[str]:
        """Map text onto a label, ignoring case and surrounding whitespace."""
        if text is None:
            return None
        folded = str(text).strip().casefold()
        for label in self.labels:
            if label.casefold() == folded:
                return label
        return None

    def __contains__(self, label) -> bool:
        return self.canonical(label) is not None

    def to_dict(self) -> Dict[str, Any]:
        return {'labels': list(self.labels)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'LabelSpace':
        return cls(tuple(data['labels']))


@dataclass(frozen=True)
class Example:
    """One input record: named text fields plus an optional gold label."""

    id: str
    fields: Mapping[str, str]
    gold: Optional[str] = None

    def __post_init__(self):
        if not str(self.id):
            raise ContractError("example id must be non-empty")
        object.__setattr__(self, 'id', str(self.id))
        object.__setattr__(self, 'fields', {str(k): str(v) for k, v in dict(self.fields).items()})

    def to_dict(self) -> Dict[str, Any]:
        data = {'id': self.id, 'fields': dict(self.fields)}
        if self.gold is not None:
            data['label'] = self.gold
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Example':
        return cls(id=data['id'], fields=data.get('fields', {}), gold=data.get('label'))


@dataclass(frozen=True)
class WeightedDataset:
    """
    Training examples with a weight distribution over them.

    Weights are stored as plain floats so that equality and serialization
    stay exact; the math in ml.prefer_weights converts them to numpy.
    """

    examples: Tuple[Example, ...]
    weights: Tuple[float, ...]

    def __post_init__(self):
        examples = tuple(self.examples)
        weights = tuple(float(w) for w in self.weights)
        if len(examples) != len(weights):
            raise ContractError(
                f"{len(examples)} examples but {len(weights)} weights"
            )
        if any(not math.isfinite(w) or w < 0 for w in weights):
            raise ContractError("weights must be finite and non-negative")
        ids = [example.id for example in examples]
        if len(set(ids)) != len(ids):
            raise ContractError("example ids must be unique within a dataset")
        object.__setattr__(self, 'examples', examples)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def uniform(cls, examples: Sequence[Example]) -> 'WeightedDataset':
        examples = tuple(examples)
        if not examples:
            raise ContractError("dataset must not be empty")
        return cls(examples, tuple(1.0 / len(examples) for _ in examples))

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def golds(self) -> List[Optional[str]]:
        return [example.gold for example in self.examples]

    def normalized(self) -> 'WeightedDataset':
        total = math.fsum(self.weights)
        if not total > 0 or not math.isfinite(total):
            raise ContractError(f"cannot normalize weights summing to {total}")
        return replace(self, weights=tuple(w / total for w in self.weights))

    def with_weights(self, weights: Iterable[float]) -> 'WeightedDataset':
        return replace(self, weights=tuple(float(w) for w in weights))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'examples': [example.to_dict() for example in self.examples],
            'weights': list(self.weights),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'WeightedDataset':
        return cls(
            tuple(Example.from_dict(item) for item in data['examples']),
            tuple(data['weights']),
        )


@dataclass(frozen=True)
class Prompt:
    """
    A weak learner's solving prompt.

    Only the instruction changes between boosting iterations; the output
    format and demonstrations stay fixed for the task.
    """

    id: str
    instruction: str
    output_format: str
    demonstrations: Tuple[Tuple[Mapping[str, str], str], ...] = ()
    iteration: int = 0

    def __post_init__(self):
        if not self.instruction or not self.instruction.strip():
            raise ContractError("prompt instruction must be non-empty")
        if self.iteration < 0:
            raise ContractError(f"prompt iteration must be >= 0, got {self.iteration}")
        demos = tuple((dict(fields), str(label)) for fields, label in self.demonstrations)
        object.__setattr__(self, 'demonstrations', demos)

    def refined(self, instruction: str, prompt_id: Optional[str] = None) -> 'Prompt':
        """Next-iteration prompt carrying a new instruction."""
        iteration = self.iteration + 1
        return replace(
            self,
            id=prompt_id or f"p{iteration}",
            instruction=instruction.strip(),
            iteration=iteration,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'instruction': self.instruction,
            'output_format': self.output_format,
            'demonstrations': [
                {'fields': dict(fields), 'label': label} for fields, label in self.demonstrations
            ],
            'iteration': self.iteration,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Prompt':
        return cls(
            id=data.get('id', 'p0'),
            instruction=data['instruction'],
            output_format=data.get('output_format', ''),
            demonstrations=tuple(
                (item['fields'], item['label']) for item in data.get('demonstrations', [])
            ),
            iteration=int(data.get('iteration', 0)),
        )


@dataclass(frozen=True)
class Reflection:
    """Reasons the model gave for a prompt's failures."""

    reasons: Tuple[str, ...]
    source_prompt_id: str
    iteration: int

    def __post_init__(self):
        reasons = tuple(reason.strip() for reason in self.reasons)
        if any(not reason for reason in reasons):
            raise ContractError("reflection reasons must be non-empty")
        object.__setattr__(self, 'reasons', reasons)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'reasons': list(self.reasons),
            'source_prompt_id': self.source_prompt_id,
            'iteration': self.iteration,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Reflection':
        return cls(tuple(data['reasons']), data['source_prompt_id'], int(data['iteration']))


@dataclass(frozen=True)
class WeakLearner:
    """A prompt bound to its ensemble weight (lambda) and training error."""

    prompt: Prompt
    weight: float
    train_error: float
    reflections: Tuple[Reflection, ...] = ()

    def __post_init__(self):
        if not math.isfinite(self.weight):
            raise ContractError(f"learner weight must be finite, got {self.weight}")
        if not 0.0 <= self.train_error <= 1.0:
            raise ContractError(f"train error must be in [0, 1], got {self.train_error}")
        object.__setattr__(self, 'reflections', tuple(self.reflections))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'prompt': self.prompt.to_dict(),
            'lambda': self.weight,
            'train_error': self.train_error,
            'reflections': [reflection.to_dict() for reflection in self.reflections],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'WeakLearner':
        return cls(
            prompt=Prompt.from_dict(data['prompt']),
            weight=float(data['lambda']),
            train_error=float(data['train_error']),
            reflections=tuple(Reflection.from_dict(item) for item in data.get('reflections', [])),
        )


@dataclass(frozen=True)
class Ensemble:
    """Ordered weak learners plus everything inference needs to replay them."""

    learners: Tuple[WeakLearner, ...]
    label_space: LabelSpace
    seed: int = 0
    config_digest: str = ''
    tau: float = 1.0
    mode: str = 'full'

    def __post_init__(self):
        object.__setattr__(self, 'learners', tuple(self.learners))

    def __len__(self) -> int:
        return len(self.learners)

    def with_learner(self, learner: WeakLearner) -> 'Ensemble':
        return replace(self, learners=self.learners + (learner,))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'learners': [learner.to_dict() for learner in self.learners],
            'label_space': self.label_space.to_dict(),
            'seed': self.seed,
            'config_digest': self.config_digest,
            'tau': self.tau,
            'mode': self.mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Ensemble':
        return cls(
            learners=tuple(WeakLearner.from_dict(item) for item in data['learners']),
            label_space=LabelSpace.from_dict(data['label_space']),
            seed=int(data.get('seed', 0)),
            config_digest=data.get('config_digest', ''),
            tau=float(data.get('tau', 1.0)),
            mode=data.get('mode', 'full'),
        )


@dataclass(frozen=True)
class ConfidenceVector:
    """
    Forward and backward per-label confidence scores.

    A single evaluation pass fills one side; the other stays None.
    """

    forward: Optional[Tuple[float, ...]] = None
    backward: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        forward = None if self.forward is None else tuple(float(s) for s in self.forward)
        backward = None if self.backward is None else tuple(float(s) for s in self.backward)
        if forward is not None and backward is not None and len(backward) != len(forward):
            raise ContractError(
                f"forward has {len(forward)} scores but backward has {len(backward)}"
            )
        if any(not math.isfinite(s) for s in (forward or ()) + (backward or ())):
            raise ContractError("confidence scores must be finite")
        object.__setattr__(self, 'forward', forward)
        object.__setattr__(self, 'backward', backward)

    def merged(self, other: 'ConfidenceVector') -> 'ConfidenceVector':
        """Fill the sides this vector lacks from another pass."""
        return ConfidenceVector(
            forward=self.forward if self.forward is not None else other.forward,
            backward=self.backward if self.backward is not None else other.backward,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'forward': None if self.forward is None else list(self.forward),
            'backward': None if self.backward is None else list(self.backward),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ConfidenceVector':
        forward = data.get('forward')
        backward = data.get('backward')
        return cls(
            None if forward is None else tuple(forward),
            None if backward is None else tuple(backward),
        )


def load_examples(path, label_space: Optional[LabelSpace] = None) -> List[Example]:
    """
    Read a line-delimited dataset file.

    Args:
        path: File with one {"id", "fields", "label"?} object per line
        label_space: When given, gold labels are checked and canonicalised

    Returns:
        list: Examples in file order
    """
    examples = []
    seen = set()
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ContractError(f"{path}:{line_number}: invalid JSON ({e.msg})") from e
            example = Example.from_dict(record)
            if example.id in seen:
                raise ContractError(f"{path}:{line_number}: duplicate example id '{example.id}'")
            seen.add(example.id)
            if label_space is not None and example.gold is not None:
                gold = label_space.canonical(example.gold)
                if gold is None:
                    raise ContractError(
                        f"{path}:{line_number}: label '{example.gold}' not in {list(label_space.labels)}"
                    )
                example = replace(example, gold=gold)
            examples.append(example)
    return examples


def labeled_examples(examples: Iterable[Example], label_space: LabelSpace) -> List[Example]:
    """
    Examples with gold labels canonicalised into the label space.

    Raises:
        ContractError: If an example has no gold label or one outside the label space
    """
    labeled = []
    for example in examples:
        if example.gold is None:
            raise ContractError(f"example '{example.id}' has no gold label")
        gold = label_space.canonical(example.gold)
        if gold is None:
            raise ContractError(
                f"example '{example.id}': label '{example.gold}' not in {list(label_space.labels)}"
            )
        labeled.append(example if gold == example.gold else replace(example, gold=gold))
    return labeled


def write_examples(path, examples: Iterable[Example]):
    """Write examples in the line-delimited dataset format."""
    with open(path, 'w', encoding='utf-8') as f:
        for example in examples:
            f.write(json.dumps(example.to_dict(), ensure_ascii=False, sort_keys=True) + '\n')
