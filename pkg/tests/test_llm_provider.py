"""
Tests for the provider layer: call metering, scripted answers and the
live HTTP client (through httpx.MockTransport, never the network)
"""

import json

import httpx
import pytest

from conftest import DATA_DIR, accuracy_map, make_examples, offline_config
from src.core.llm_provider import (
    CompletionRequest,
    LiveProvider,
    MalformedResponseError,
    ProviderConfigError,
    ProviderError,
    ScriptedProvider,
    ScriptRule,
    TransportError,
    UnscriptedRequestError,
    build_provider,
    request_fingerprint,
    scripted_weak_classifier,
)
from src.core.prefer_templates import parse_label, parse_reflections


def _request(text='Sentence 1: q\nSentence 2: s', kind='solving', **kwargs):
    return CompletionRequest(system_text='system', user_text=text, kind=kind, **kwargs)


# ------------------------------------------------------------ scripted


def test_scripted_provider_answers_by_fingerprint_and_substring():
    fingerprinted = _request('exact text')
    provider = ScriptedProvider([
        ScriptRule('solving', 'by fingerprint', fingerprint=request_fingerprint(fingerprinted)),
        ScriptRule('solving', 'by substring', substring='needle'),
        ScriptRule('forward', 'two parts', substring=('alpha', 'beta')),
    ])
    assert provider.complete(fingerprinted).text == 'by fingerprint'
    assert provider.complete(_request('hay needle hay')).text == 'by substring'
    assert provider.complete(_request('beta then alpha', kind='forward')).text == 'two parts'
    with pytest.raises(UnscriptedRequestError, match='unscripted request'):
        provider.complete(_request('alpha only', kind='forward'))


def test_scripted_provider_is_pure():
    provider = ScriptedProvider([ScriptRule('*', 'same answer')])
    request = _request('anything')
    assert provider.complete(request) == provider.complete(request)


def test_call_counter_counts_successful_calls_only():
    provider = ScriptedProvider([ScriptRule('solving', 'ok', substring='known')])
    assert provider.call_count() == 0
    provider.complete(_request('known'))
    assert provider.call_count() == 1
    with pytest.raises(UnscriptedRequestError):
        provider.complete(_request('other'))
    assert provider.call_count() == 1
    assert provider.failed_count() == 1
    provider.reset_count()
    assert provider.call_count() == 0
    assert provider.failed_count() == 0


def test_empty_request_text_is_rejected():
    provider = ScriptedProvider([ScriptRule('*', 'ok')])
    with pytest.raises(ProviderError):
        provider.complete(CompletionRequest(system_text='system', user_text=''))
    assert provider.call_count() == 0


def test_transcript_file_loading(tmp_path):
    provider = ScriptedProvider.from_transcript(DATA_DIR / 'transcripts' / 'toy_transcript.jsonl')
    answer = provider.complete(_request('Sentence 2: Spiders are arachnids with eight legs.'))
    assert answer.text.endswith('Label: Yes')

    bad = tmp_path / 'bad.jsonl'
    bad.write_text('{"response": "missing match"}\n', encoding='utf-8')
    with pytest.raises(ProviderConfigError, match='bad.jsonl:1'):
        ScriptedProvider.from_transcript(bad)


def test_weak_classifier_follows_accuracy_map(yes_no):
    examples = make_examples(['Yes', 'No', 'Yes', 'No'])
    provider = scripted_weak_classifier(accuracy_map(examples, ['e01']), examples, yes_no)

    def solve(example):
        return parse_label(provider.complete(_request(example_id=example.id)).text, yes_no)

    assert [solve(e) for e in examples] == ['Yes', 'Yes', 'Yes', 'No']
    forward = provider.complete(_request(kind='forward', example_id='e00')).text
    assert forward.splitlines() == ['Yes: 0.9', 'No: 0.1']
    backward = provider.complete(_request(kind='backward', example_id='e00')).text
    assert backward.splitlines() == ['Yes: 0.1', 'No: 0.9']

    reasons = parse_reflections(provider.complete(_request('feedback', kind='feedback')).text).reasons
    assert reasons == ('the prompt is too vague', 'the prompt ignores negation')
    refine = provider.complete(_request('refine', kind='refine', prompt_iteration=2)).text
    assert '[revision 3]' in refine


def test_weak_classifier_schedule_switches_by_prompt_iteration(yes_no):
    examples = make_examples(['Yes', 'No'])
    from src.core.llm_provider import ScriptedWeakClassifier
    provider = ScriptedWeakClassifier(
        [accuracy_map(examples, ['e00']), accuracy_map(examples, ['e01'])], examples, yes_no
    )
    assert provider.answer_for('e00', 0) == 'No'
    assert provider.answer_for('e00', 1) == 'Yes'
    assert provider.answer_for('e01', 5) == 'Yes'


def test_weak_classifier_rejects_unknown_requests(yes_no):
    examples = make_examples(['Yes', 'No'])
    provider = scripted_weak_classifier(accuracy_map(examples), examples, yes_no)
    with pytest.raises(UnscriptedRequestError):
        provider.complete(_request(example_id='not-in-map'))
    with pytest.raises(ProviderConfigError):
        scripted_weak_classifier({'e00': True}, examples, yes_no)


def test_build_provider_selectors(monkeypatch):
    config = offline_config()
    scripted = build_provider(f"scripted:{DATA_DIR / 'transcripts' / 'toy_transcript.jsonl'}", config)
    assert isinstance(scripted, ScriptedProvider)
    with pytest.raises(ProviderConfigError):
        build_provider('carrier-pigeon', config)
    monkeypatch.delenv('PREFER_API_KEY', raising=False)
    with pytest.raises(ProviderConfigError, match='PREFER_API_KEY'):
        build_provider('live', config)


# ------------------------------------------------------------ live client


def _completion(text, tokens=7):
    return httpx.Response(200, json={
        'choices': [{'message': {'role': 'assistant', 'content': text}}],
        'usage': {'total_tokens': tokens},
    })


def _live(handler, sleeps=None, **kwargs):
    sleeps = [] if sleeps is None else sleeps
    return LiveProvider(
        base_url='https://llm.invalid/v1', model='test-model', api_key='secret',
        transport=httpx.MockTransport(handler), sleep=sleeps.append, **kwargs,
    )


def test_live_provider_requires_api_key_before_network():
    def handler(request):
        raise AssertionError('network must not be touched')

    with pytest.raises(ProviderConfigError):
        LiveProvider(base_url='https://llm.invalid/v1', model='m', api_key='',
                     transport=httpx.MockTransport(handler))


def test_live_provider_posts_chat_completion():
    seen = []

    def handler(request):
        seen.append(request)
        return _completion('Label: Yes')

    provider = _live(handler)
    result = provider.complete(_request('hello', temperature=0.0, max_tokens=64, seed=11))
    assert result.text == 'Label: Yes'
    assert result.usage_tokens == 7
    assert provider.call_count() == 1

    request = seen[0]
    assert request.url.path == '/v1/chat/completions'
    assert request.headers['Authorization'] == 'Bearer secret'
    body = json.loads(request.content)
    assert body['model'] == 'test-model'
    assert body['messages'][1] == {'role': 'user', 'content': 'hello'}
    assert body['max_tokens'] == 64
    assert body['seed'] == 11


def test_live_provider_retries_transport_errors_and_counts_once():
    attempts = []
    sleeps = []

    def handler(request):
        attempts.append(request)
        if len(attempts) < 3:
            return httpx.Response(503, text='busy')
        return _completion('done')

    provider = _live(handler, sleeps)
    assert provider.complete(_request()).text == 'done'
    assert len(attempts) == 3
    assert len(sleeps) == 2
    assert provider.call_count() == 1
    assert provider.failed_count() == 0


def test_live_provider_gives_up_after_three_attempts():
    attempts = []

    def handler(request):
        attempts.append(request)
        raise httpx.ConnectError('refused', request=request)

    provider = _live(handler)
    with pytest.raises(TransportError):
        provider.complete(_request())
    assert len(attempts) == 3
    assert provider.call_count() == 0
    assert provider.failed_count() == 1


def test_live_provider_malformed_payload_is_not_retried():
    attempts = []

    def handler(request):
        attempts.append(request)
        return httpx.Response(200, text='{"choices": []}')

    provider = _live(handler)
    with pytest.raises(MalformedResponseError) as info:
        provider.complete(_request())
    assert info.value.raw == '{"choices": []}'
    assert len(attempts) == 1


def test_live_provider_client_errors_fail_immediately():
    attempts = []

    def handler(request):
        attempts.append(request)
        return httpx.Response(401, text='bad key')

    provider = _live(handler)
    with pytest.raises(ProviderError, match='401'):
        provider.complete(_request())
    assert len(attempts) == 1


def test_live_provider_tolerates_null_usage():
    def handler(request):
        return httpx.Response(200, json={'choices': [{'message': {'content': 'Label: Yes'}}], 'usage': None})

    result = _live(handler).complete(_request())
    assert result.text == 'Label: Yes'
    assert result.usage_tokens == 0


def test_live_provider_non_object_usage_is_malformed():
    body = '{"choices": [{"message": {"content": "Label: Yes"}}], "usage": "lots"}'

    def handler(request):
        return httpx.Response(200, text=body)

    provider = _live(handler)
    with pytest.raises(MalformedResponseError) as info:
        provider.complete(_request())
    assert info.value.raw == body
    assert provider.failed_count() == 1


def test_live_provider_frees_its_slot_while_backing_off():
    attempts = []
    free_during_sleep = []

    def handler(request):
        attempts.append(request)
        if len(attempts) == 1:
            return httpx.Response(429, text='slow down')
        return _completion('done')

    def sleep(seconds):
        acquired = provider._slots.acquire(blocking=False)
        free_during_sleep.append(acquired)
        if acquired:
            provider._slots.release()

    provider = LiveProvider(
        base_url='https://llm.invalid/v1', model='test-model', api_key='secret', max_in_flight=1,
        transport=httpx.MockTransport(handler), sleep=sleep,
    )
    assert provider.complete(_request()).text == 'done'
    assert free_during_sleep == [True]


def test_transcript_rejects_unknown_request_kind(tmp_path):
    bad = tmp_path / 'kinds.jsonl'
    bad.write_text('{"match": {"kind": "solve"}, "response": "Label: Yes"}\n', encoding='utf-8')
    with pytest.raises(ProviderConfigError, match="kinds.jsonl:1.*unknown request kind 'solve'"):
        ScriptedProvider.from_transcript(bad)
