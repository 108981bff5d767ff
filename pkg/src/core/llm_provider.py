#!/usr/bin/env python3
"""
LLM Provider Communication Module
Part of the PREFER prompt ensemble engine

Handles requests to a text-completion backend. Two implementations share
one metered interface: a live HTTP chat-completion client with bounded
retries, and a scripted provider that answers from pre-registered rules
so every boosting formula can be checked offline.
"""

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import httpx
from tenacity import (
    RetryError,
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from src.core.prefer_types import Example, LabelSpace, PreferError

API_KEY_ENV = 'PREFER_API_KEY'

REQUEST_KINDS = ('solving', 'forward', 'backward', 'feedback', 'refine', 'rewrite')


class ProviderError(PreferError):
    """Base class for backend failures."""


class ProviderConfigError(ProviderError):
    """The provider cannot be built from the given settings."""


class TransportError(ProviderError):
    """Retryable failure while talking to the backend."""


class MalformedResponseError(ProviderError):
    """The backend answered, but not with a usable completion."""

    def __init__(self, message: str, raw: str = ''):
        super().__init__(message)
        self.raw = raw


class UnscriptedRequestError(ProviderError):
    """The scripted provider has no answer registered for a request."""

    def __init__(self, request: 'CompletionRequest'):
        super().__init__(
            f"unscripted request (kind={request.kind}, fingerprint={request_fingerprint(request)[:12]})"
        )
        self.request = request


@dataclass(frozen=True)
class CompletionRequest:
    """
    One completion call.

    kind tells scripted providers which template produced the text;
    sample_index separates repeated samples of the same prompt; example_id
    and prompt_iteration are bookkeeping a backend is free to ignore.
    """

    system_text: str
    user_text: str
    temperature: float = 0.0
    max_tokens: int = 512
    kind: str = 'solving'
    sample_index: int = 0
    example_id: Optional[str] = None
    prompt_iteration: int = 0
    seed: Optional[int] = None


@dataclass(frozen=True)
class CompletionResult:
    text: str
    usage_tokens: int = 0


def request_fingerprint(request: CompletionRequest) -> str:
    """Stable SHA-256 of the parts of a request that determine its answer."""
    digest = hashlib.sha256()
    digest.update(request.kind.encode('utf-8'))
    digest.update(b'\x00')
    digest.update(str(request.sample_index).encode('utf-8'))
    digest.update(b'\x00')
    digest.update(request.user_text.encode('utf-8'))
    return digest.hexdigest()


class LLMProvider(ABC):
    """
    Metered completion interface.

    complete() counts one call per produced response. Calls that end in an
    error are counted separately as failures and never as accesses.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._calls = 0
        self._failures = 0
        self.logger = logging.getLogger('prefer.provider')

    def complete(self, request: CompletionRequest) -> CompletionResult:
        if not request.system_text or not request.user_text:
            raise ProviderError("request system_text and user_text must be non-empty")
        try:
            result = self._complete(request)
        except Exception:
            with self._lock:
                self._failures += 1
            raise
        with self._lock:
            self._calls += 1
        return result

    @abstractmethod
    def _complete(self, request: CompletionRequest) -> CompletionResult:
        """Produce one completion; raise ProviderError subclasses on failure."""

    def call_count(self) -> int:
        with self._lock:
            return self._calls

    def failed_count(self) -> int:
        with self._lock:
            return self._failures

    def reset_count(self):
        with self._lock:
            self._calls = 0
            self._failures = 0

    def close(self):
        """Release any connection resources."""


class LiveProvider(LLMProvider):
    """
    HTTP chat-completion client.

    Transport problems (timeouts, connection errors, 429 and 5xx answers)
    are retried with exponential backoff; anything else fails immediately.
    """

    def __init__(self, base_url: str, model: str, api_key: Optional[str] = None,
                 timeout: float = 60.0, max_in_flight: int = 4, max_retries: int = 3,
                 retry_initial_seconds: float = 1.0, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        """
        Initialize the live provider.

        Args:
            base_url (str): Endpoint root; /chat/completions is appended
            model (str): Model name sent with every request
            api_key (str): Bearer token, defaults to $PREFER_API_KEY
            timeout (float): Per-request timeout in seconds
            max_in_flight (int): Concurrent request cap
            max_retries (int): Total attempts per call
            retry_initial_seconds (float): First backoff delay, doubled per retry
            transport: Optional httpx transport (tests use httpx.MockTransport)
            sleep: Backoff sleep function
        """
        super().__init__()
        api_key = os.environ.get(API_KEY_ENV, '') if api_key is None else api_key
        if not api_key or not api_key.strip():
            raise ProviderConfigError(f"empty API key; set {API_KEY_ENV}")
        if not base_url:
            raise ProviderConfigError("base_url is required for the live provider")
        if not model:
            raise ProviderConfigError("model is required for the live provider")
        if max_in_flight < 1:
            raise ProviderConfigError(f"max_in_flight must be >= 1, got {max_in_flight}")

        self.base_url = base_url.rstrip('/')
        self.model = model
        self.max_retries = max_retries
        self.retry_initial_seconds = retry_initial_seconds
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.client = httpx.Client(
            base_url=self.base_url,
            timeout=timeout,
            transport=transport,
            headers={
                'Authorization': f"Bearer {api_key}",
                'Content-Type': 'application/json',
            },
        )

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        retrying = Retrying(
            retry=retry_if_exception_type(TransportError),
            wait=wait_exponential(multiplier=self.retry_initial_seconds, min=self.retry_initial_seconds),
            stop=stop_after_attempt(self.max_retries),
            before_sleep=before_sleep_log(self.logger, logging.WARNING),
            sleep=self._sleep,
        )
        try:
            for attempt in retrying:
                with attempt:
                    with self._slots:
                        return self._post(request)
        except RetryError as e:
            self.logger.error(f"Giving up after {self.max_retries} attempts: {e.last_attempt.exception()}")
            raise e.last_attempt.exception() from e

    def _post(self, request: CompletionRequest) -> CompletionResult:
        body = {
            'model': self.model,
            'messages': [
                {'role': 'system', 'content': request.system_text},
                {'role': 'user', 'content': request.user_text},
            ],
            'temperature': request.temperature,
            'max_tokens': request.max_tokens,
        }
        if request.seed is not None:
            body['seed'] = request.seed

        try:
            response = self.client.post('/chat/completions', json=body)
        except httpx.TransportError as e:
            raise TransportError(f"transport failure: {e}") from e

        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"backend answered HTTP {response.status_code}")
        if response.status_code >= 400:
            raise ProviderError(f"backend rejected request: HTTP {response.status_code} {response.text[:200]}")

        raw = response.text
        try:
            payload = response.json()
            text = payload['choices'][0]['message']['content']
            usage = int((payload.get('usage') or {}).get('total_tokens') or 0)
        except (ValueError, KeyError, IndexError, TypeError, AttributeError) as e:
            raise MalformedResponseError(f"malformed completion payload: {e}", raw=raw) from e
        if not isinstance(text, str):
            raise MalformedResponseError("completion content is not text", raw=raw)
        return CompletionResult(text=text, usage_tokens=usage)

    def close(self):
        self.client.close()
        self.logger.info("HTTP client closed")


@dataclass(frozen=True)
class ScriptRule:
    """
    Answer `response` to requests of `kind` whose text contains `substring`.

    substring may be a tuple, in which case every part must occur.
    """

    kind: str
    response: str
    substring: Union[str, Tuple[str, ...]] = ''
    fingerprint: Optional[str] = None
    sample: Optional[int] = None

    def matches(self, request: CompletionRequest) -> bool:
        if self.kind != '*' and self.kind != request.kind:
            return False
        if self.sample is not None and self.sample != request.sample_index:
            return False
        if self.fingerprint is not None:
            return self.fingerprint == request_fingerprint(request)
        parts = (self.substring,) if isinstance(self.substring, str) else self.substring
        return all(part in request.user_text for part in parts)

    @classmethod
    def from_record(cls, record: Mapping) -> 'ScriptRule':
        match = record['match']
        kind = match.get('kind', '*')
        if kind != '*' and kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind '{kind}'")
        substring = match.get('substring', '')
        return cls(
            kind=kind,
            response=record['response'],
            substring=substring if isinstance(substring, str) else tuple(substring),
            fingerprint=match.get('fingerprint'),
            sample=match.get('sample'),
        )


class ScriptedProvider(LLMProvider):
    """
    Deterministic offline provider.

    Rules are tried in order and the first match answers. The provider keeps
    no state besides the call counter, so the same request always gets the
    same response.
    """

    def __init__(self, rules: Sequence[ScriptRule] = ()):
        super().__init__()
        self.rules = list(rules)

    @classmethod
    def from_transcript(cls, path) -> 'ScriptedProvider':
        """
        Load rules from a line-delimited transcript file.

        Args:
            path: File with one {"match": {...}, "response": "..."} per line

        Returns:
            ScriptedProvider: Provider answering from those rules
        """
        rules = []
        with open(path, 'r', encoding='utf-8') as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rules.append(ScriptRule.from_record(json.loads(line)))
                except (ValueError, KeyError) as e:
                    raise ProviderConfigError(f"{path}:{line_number}: bad transcript record ({e})") from e
        return cls(rules)

    def _complete(self, request: CompletionRequest) -> CompletionResult:
        text = self._respond(request)
        if text is None:
            raise UnscriptedRequestError(request)
        return CompletionResult(text=text, usage_tokens=len(text.split()))

    def _respond(self, request: CompletionRequest) -> Optional[str]:
        for rule in self.rules:
            if rule.matches(request):
                return rule.response
        return None


class ScriptedWeakClassifier(ScriptedProvider):
    """
    Scripted stand-in for a weak learner with known correctness.

    Each accuracy map says, per example id, whether the learner answers
    correctly. The map used for a request is picked by the request's prompt
    iteration (the last map keeps applying once the schedule runs out).
    Wrong answers always name the first label that differs from the gold.
    """

    def __init__(self, schedule: Sequence[Mapping[str, bool]], examples: Sequence[Example],
                 label_space: LabelSpace, reasons: Sequence[str] = ('the prompt is too vague',
                                                                     'the prompt ignores negation'),
                 new_instruction: str = 'Decide carefully whether sentence 2 answers the question in sentence 1.',
                 rules: Sequence[ScriptRule] = ()):
        super().__init__(rules)
        if not schedule:
            raise ProviderConfigError("at least one accuracy map is required")
        self.schedule = [dict(accuracy) for accuracy in schedule]
        self.golds: Dict[str, str] = {example.id: example.gold for example in examples}
        for accuracy in self.schedule:
            missing = set(self.golds) - set(accuracy)
            if missing:
                raise ProviderConfigError(f"accuracy map misses examples {sorted(missing)}")
        self.label_space = label_space
        self.reasons = list(reasons)
        self.new_instruction = new_instruction

    def answer_for(self, example_id: str, prompt_iteration: int) -> str:
        gold = self.golds[example_id]
        accuracy = self.schedule[min(prompt_iteration, len(self.schedule) - 1)]
        if accuracy[example_id]:
            return gold
        return next(label for label in self.label_space.labels if label != gold)

    def _scores(self, answer: str, high: float, low: float) -> str:
        lines = [f"{label}: {high if label == answer else low}" for label in self.label_space.labels]
        return '\n'.join(lines)

    def _respond(self, request: CompletionRequest) -> Optional[str]:
        scripted = super()._respond(request)
        if scripted is not None:
            return scripted
        if request.kind in ('solving', 'forward', 'backward'):
            if request.example_id not in self.golds:
                return None
            answer = self.answer_for(request.example_id, request.prompt_iteration)
            if request.kind == 'solving':
                return f"The second sentence was compared with the first.\nLabel: {answer}"
            if request.kind == 'forward':
                return self._scores(answer, 0.9, 0.1)
            return self._scores(answer, 0.1, 0.9)
        if request.kind == 'feedback':
            return ''.join(f"<START>{reason}<END>" for reason in self.reasons)
        if request.kind in ('refine', 'rewrite'):
            revision = request.prompt_iteration + 1
            suffix = f" (retry {request.sample_index})" if request.sample_index else ''
            return f"<START>{self.new_instruction} [revision {revision}{suffix}]<END>"
        return None


def scripted_weak_classifier(accuracy_map: Mapping[str, bool], examples: Sequence[Example],
                             label_space: LabelSpace, **kwargs) -> ScriptedWeakClassifier:
    """Provider answering every prompt with the correctness in accuracy_map."""
    return ScriptedWeakClassifier([accuracy_map], examples, label_space, **kwargs)


def build_provider(spec: str, config) -> LLMProvider:
    """
    Create a provider from a CLI-style selector.

    Args:
        spec (str): "live" or "scripted:<transcript path>"
        config: PreferConfig with the live endpoint settings

    Returns:
        LLMProvider: Ready-to-use provider
    """
    if spec.startswith('scripted:'):
        return ScriptedProvider.from_transcript(spec.split(':', 1)[1])
    if spec == 'live':
        return LiveProvider(
            base_url=config.base_url,
            model=config.model,
            timeout=config.request_timeout_seconds,
            max_in_flight=config.max_in_flight,
            max_retries=config.max_retries,
            retry_initial_seconds=config.retry_initial_seconds,
        )
    raise ProviderConfigError(f"unknown provider '{spec}' (use 'live' or 'scripted:<transcript>')")
