#!/usr/bin/env python3
"""
PREFER Checkpoint Persistence
Saves and restores the boosting loop state between iterations

A checkpoint directory holds checkpoint.json (canonical JSON, versioned by
an explicit schema integer), the progress stream and the reflections
export. One process owns a directory at a time through a PID lock file.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from src.core.prefer_types import Ensemble, PreferError, Prompt, Reflection

SCHEMA_VERSION = 1
CHECKPOINT_FILE = 'checkpoint.json'
LOCK_FILE = '.prefer.lock'
PROGRESS_FILE = 'progress.jsonl'
REFLECTIONS_FILE = 'reflections.jsonl'

logger = logging.getLogger('prefer.checkpoint')


class CheckpointError(PreferError):
    """Unreadable, incompatible or locked checkpoint."""


@dataclass(frozen=True)
class Checkpoint:
    """
    Everything needed to continue training where it stopped.

    No wall-clock data is stored, so identical runs write identical files.
    """

    ensemble: Ensemble
    dataset_weights: Tuple[float, ...]
    completed_iterations: int
    rng_state: Mapping[str, int]
    provider_calls_total: int
    config_digest: str
    next_prompt: Optional[Prompt] = None
    finished: bool = False
    example_ids: Tuple[str, ...] = ()
    dataset_path: str = ''
    config: Mapping[str, Any] = field(default_factory=dict)
    # where next_prompt came from; needed to request a replacement for it
    parent_prompt: Optional[Prompt] = None
    pending_reflection: Optional[Reflection] = None

    def __post_init__(self):
        object.__setattr__(self, 'dataset_weights', tuple(float(w) for w in self.dataset_weights))
        object.__setattr__(self, 'example_ids', tuple(self.example_ids))
        object.__setattr__(self, 'rng_state', dict(self.rng_state))
        object.__setattr__(self, 'config', dict(self.config))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema': SCHEMA_VERSION,
            'ensemble': self.ensemble.to_dict(),
            'dataset_weights': list(self.dataset_weights),
            'completed_iterations': self.completed_iterations,
            'rng_state': dict(self.rng_state),
            'provider_calls_total': self.provider_calls_total,
            'config_digest': self.config_digest,
            'next_prompt': None if self.next_prompt is None else self.next_prompt.to_dict(),
            'finished': self.finished,
            'example_ids': list(self.example_ids),
            'dataset_path': self.dataset_path,
            'config': dict(self.config),
            'parent_prompt': None if self.parent_prompt is None else self.parent_prompt.to_dict(),
            'pending_reflection': (
                None if self.pending_reflection is None else self.pending_reflection.to_dict()
            ),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Checkpoint':
        schema = data.get('schema')
        if schema != SCHEMA_VERSION:
            raise CheckpointError(
                f"incompatible checkpoint schema {schema!r} (this engine reads schema {SCHEMA_VERSION})"
            )
        try:
            next_prompt = data.get('next_prompt')
            parent_prompt = data.get('parent_prompt')
            pending_reflection = data.get('pending_reflection')
            return cls(
                ensemble=Ensemble.from_dict(data['ensemble']),
                dataset_weights=tuple(data['dataset_weights']),
                completed_iterations=int(data['completed_iterations']),
                rng_state={k: int(v) for k, v in data['rng_state'].items()},
                provider_calls_total=int(data['provider_calls_total']),
                config_digest=data['config_digest'],
                next_prompt=None if next_prompt is None else Prompt.from_dict(next_prompt),
                finished=bool(data.get('finished', False)),
                example_ids=tuple(data.get('example_ids', ())),
                dataset_path=data.get('dataset_path', ''),
                config=data.get('config', {}),
                parent_prompt=None if parent_prompt is None else Prompt.from_dict(parent_prompt),
                pending_reflection=(
                    None if pending_reflection is None else Reflection.from_dict(pending_reflection)
                ),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint is missing or has a bad field: {e}") from e


def dumps_canonical(data: Any) -> str:
    """Sorted keys, shortest round-trip floats, trailing newline."""
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + '\n'


def atomic_write_text(path, text: str):
    """Write to a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def checkpoint_path(directory) -> Path:
    return Path(directory) / CHECKPOINT_FILE


def save_checkpoint(directory, checkpoint: Checkpoint) -> Path:
    path = checkpoint_path(directory)
    atomic_write_text(path, dumps_canonical(checkpoint.to_dict()))
    logger.info(
        f"Checkpoint saved: {checkpoint.completed_iterations} iterations, "
        f"{len(checkpoint.ensemble)} learners -> {path}"
    )
    return path


def load_checkpoint(directory) -> Checkpoint:
    """
    Read checkpoint.json from a checkpoint directory (or the file itself).

    Raises:
        CheckpointError: Missing file, corrupt content (with byte offset)
            or a schema this engine does not read
    """
    path = Path(directory)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"no checkpoint at {path}") from e

    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: corrupt checkpoint, invalid UTF-8 at byte {e.start}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode('utf-8'))
        raise CheckpointError(f"{path}: corrupt checkpoint at byte {offset}: {e.msg}") from e
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}: corrupt checkpoint at byte 0: expected a JSON object")
    return Checkpoint.from_dict(data)


def _pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class CheckpointLock:
    """
    Exclusive ownership of a checkpoint directory.

    The lock file holds the owner's PID. A lock left behind by a process
    that no longer exists is taken over.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.path = self.directory / LOCK_FILE
        self.held = False

    def acquire(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            except FileExistsError:
                owner = self._owner()
                if owner is not None and _pid_alive(owner):
                    raise CheckpointError(f"checkpoint directory {self.directory} is locked by PID {owner}")
                logger.warning(f"Taking over stale lock {self.path} (PID {owner})")
                try:
                    os.unlink(self.path)
                except FileNotFoundError:
                    pass
                continue
            with os.fdopen(fd, 'w') as f:
                f.write(str(os.getpid()))
            self.held = True
            return self
        raise CheckpointError(f"could not acquire lock {self.path}")

    def _owner(self) -> Optional[int]:
        try:
            return int(self.path.read_text().strip())
        except (OSError, ValueError):
            return None

    def release(self):
        if self.held:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass
            self.held = False

    def __enter__(self):
        return self.acquire()

    def __exit__(self, exc_type, exc, tb):
        self.release()


def write_reflections(directory, ensemble: Ensemble) -> Path:
    """Export every admitted learner's instruction, weight and reasons as JSONL."""
    path = Path(directory) / REFLECTIONS_FILE
    lines = [json.dumps(record, sort_keys=True, ensure_ascii=False) for record in reflection_records(ensemble)]
    atomic_write_text(path, ''.join(line + '\n' for line in lines))
    return path


def reflection_records(ensemble: Ensemble) -> List[Dict[str, Any]]:
    records = []
    for position, learner in enumerate(ensemble.learners):
        records.append({
            'learner': position,
            'prompt_id': learner.prompt.id,
            'iteration': learner.prompt.iteration,
            'instruction': learner.prompt.instruction,
            'lambda': learner.weight,
            'train_error': learner.train_error,
            'reasons': [reason for reflection in learner.reflections for reason in reflection.reasons],
        })
    return records
