import asyncio
import json

import httpx
import pytest

from recrank import gateway
from recrank.exceptions import CompletionFailed
from recrank.gateway.base import FAILED, MOCK_SCRIPTED
from recrank.gateway.mocks import EchoHintBackend
from recrank.prompts import (
    LISTWISE, NO, PAIRWISE, POINTWISE, POINTWISE_FIX, YES, PromptInstance)

PARAMS = gateway.GenerationParams()


def _listwise(user_id='1', text='rank these'):
    return PromptInstance(
        LISTWISE, text, user_id, ['a', 'b', 'c'], '1. A, 2. B, 3. C',
        meta={'hint_order': ['a', 'b', 'c'], 'hint_titles': ['A', 'B', 'C']})


def _pairwise(item_a, item_b, winner):
    return PromptInstance(
        PAIRWISE, f'{item_a} or {item_b}', '1', [item_a, item_b], winner,
        meta={'hint_winner': winner})


def _pointwise(item, hint, user_id='1'):
    return PromptInstance(
        POINTWISE, f'score {item}', user_id, [item], hint,
        meta={'hint_rank': 1})


def _http(handler, **kwargs):
    config = gateway.BackendConfig(
        kind='http-chat', endpoint='http://llm.test/v1/', model='tiny',
        backoff=0, **kwargs)
    return gateway.get_backend(
        config, transport=httpx.MockTransport(handler))


def _chat(text):
    return httpx.Response(
        200, json={'choices': [{'message': {'content': text}}]})


class Responses:
    """ Replays the given responses in order, recording every request """

    def __init__(self, *responses):
        self.responses = list(responses)
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        return self.responses.pop(0)

    def bodies(self):
        return [json.loads(r.content) for r in self.requests]


@pytest.mark.asyncio
async def test_http_retries_transient_errors():
    handler = Responses(
        httpx.Response(500), httpx.Response(500), _chat('1. A'))
    backend = _http(handler)

    text, attempts = await backend.complete_text(_listwise(), PARAMS)
    await backend.close()

    assert (text, attempts) == ('1. A', 3)
    assert len(handler.requests) == 3
    assert handler.requests[0].url == 'http://llm.test/v1/chat/completions'
    body = handler.bodies()[0]
    assert body['messages'] == [{'role': 'user', 'content': 'rank these'}]
    assert body['model'] == 'tiny'
    assert body['top_k'] == PARAMS.top_k


@pytest.mark.asyncio
async def test_http_gives_up(request_signals):
    handler = Responses(*(httpx.Response(503) for _ in range(3)))
    backend = _http(handler, max_retries=2)

    result = await gateway.complete(_listwise(), PARAMS, backend)
    await backend.close()

    assert not result.ok
    assert result.text is None
    assert 'gave up after 3 attempts' in result.error
    assert result.transcript.status == FAILED
    assert result.transcript.attempts == 3
    assert len(request_signals['failed']) == 1
    assert not request_signals['finished']


@pytest.mark.asyncio
async def test_http_client_error_is_final():
    handler = Responses(httpx.Response(401, text='bad token'))
    backend = _http(handler)
    with pytest.raises(CompletionFailed) as e:
        await backend.complete_text(_listwise(), PARAMS)
    await backend.close()
    assert e.value.attempts == 1
    assert 'HTTP 401' in str(e.value)


@pytest.mark.asyncio
async def test_http_malformed_payload():
    handler = Responses(httpx.Response(200, json={'choices': []}))
    backend = _http(handler)
    with pytest.raises(CompletionFailed):
        await backend.complete_text(_listwise(), PARAMS)
    await backend.close()


@pytest.mark.asyncio
async def test_http_drops_rejected_top_k():
    handler = Responses(
        httpx.Response(400, text='unknown field top_k'), _chat('Yes.'),
        _chat('No.'))
    backend = _http(handler)

    first = await backend.complete_text(_pairwise('a', 'b', 'a'), PARAMS)
    second = await backend.complete_text(_pairwise('b', 'a', 'a'), PARAMS)
    await backend.close()

    assert first == ('Yes.', 1)
    assert second == ('No.', 1)
    assert ['top_k' in body for body in handler.bodies()] == \
        [True, False, False]


@pytest.mark.asyncio
async def test_http_sends_token(monkeypatch):
    monkeypatch.setenv('RECRANK_API_TOKEN', 'secret')
    handler = Responses(_chat('1. A'))
    backend = _http(handler)
    await backend.complete_text(_listwise(), PARAMS)
    await backend.close()
    assert handler.requests[0].headers['Authorization'] == 'Bearer secret'


def test_request_body_without_top_k():
    config = gateway.BackendConfig(supports_top_k=False)
    backend = gateway.get_backend(config)
    assert 'top_k' not in backend.request_body(_listwise(), PARAMS)


class SlowBackend(EchoHintBackend):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.in_flight = 0
        self.peak = 0

    async def complete_text(self, prompt, params):
        self.in_flight += 1
        self.peak = max(self.peak, self.in_flight)
        await asyncio.sleep(0.01)
        self.in_flight -= 1
        return await super().complete_text(prompt, params)


@pytest.mark.asyncio
async def test_batch_concurrency_limit():
    backend = SlowBackend(gateway.BackendConfig(concurrency=3))
    prompts = [_pointwise(str(n), f'{n % 5 + 1}.0') for n in range(20)]

    results = await gateway.batch_complete(prompts, PARAMS, backend)

    assert backend.peak == 3
    assert [r.text for r in results] == [p.hint for p in prompts]


def test_run_batch_reports_failures(request_signals):
    prompt = _listwise()
    config = gateway.BackendConfig(
        kind=MOCK_SCRIPTED,
        script={gateway.prompt_hash(prompt): '1. B\n2. A\n3. C'})
    other = _listwise(text='something else')

    results = gateway.run_batch(
        [prompt, other], PARAMS, gateway.get_backend(config))

    assert [r.ok for r in results] == [True, False]
    assert results[0].text == '1. B\n2. A\n3. C'
    assert results[1].text is None
    assert len(request_signals['finished']) == 1
    assert len(request_signals['failed']) == 1


def test_transcript_cache_and_replay(tmp_path):
    path = str(tmp_path / 'transcripts.jsonl')
    backend = gateway.get_backend(gateway.BackendConfig())
    prompts = [_pointwise('a', '4.0'), _pointwise('b', '2.0')]
    first = gateway.run_batch(
        prompts, PARAMS, backend, gateway.TranscriptLog(path))
    assert not any(r.cached for r in first)

    again = gateway.run_batch(
        prompts, PARAMS, backend, gateway.TranscriptLog(path))
    replayed = gateway.run_batch(
        prompts + [_pointwise('c', '1.0')], PARAMS, backend,
        gateway.TranscriptLog(replay=path))

    assert all(r.cached for r in again)
    assert [r.text for r in again] == ['4.0', '2.0']
    assert [r.cached for r in replayed] == [True, True, False]
    assert 'replay log' in replayed[2].error
    with open(path, encoding='utf-8') as f:
        assert len(f.readlines()) == 2


def test_transcript_key_includes_params(tmp_path):
    log = gateway.TranscriptLog(str(tmp_path / 'transcripts.jsonl'))
    backend = gateway.get_backend(gateway.BackendConfig())
    prompt = _pointwise('a', '4.0')
    gateway.run_batch([prompt], PARAMS, backend, log)
    hotter = gateway.GenerationParams(temperature=0.9)
    [result] = gateway.run_batch([prompt], hotter, backend, log)
    assert not result.cached
    assert len(log) == 2


def test_echo_hint_backend():
    backend = gateway.get_backend(gateway.BackendConfig())
    assert backend.answer(_listwise()) == '1. A\n2. B\n3. C'
    assert backend.answer(_pairwise('a', 'b', 'a')) == YES
    assert backend.answer(_pairwise('b', 'a', 'a')) == NO
    assert backend.answer(_pointwise('a', '3.5')) == '3.5'
    fixed = PromptInstance(POINTWISE_FIX, 'score a', '1', ['a'])
    assert backend.answer(fixed) == '3.0'


def test_oracle_backend():
    truth = gateway.GroundTruth(test_items={'1': 'c'})
    backend = gateway.get_backend(
        gateway.BackendConfig(kind='mock-oracle'), truth)
    assert backend.answer(_listwise()) == '1. C\n2. A\n3. B'
    assert backend.answer(_pairwise('a', 'c', 'a')) == NO
    assert backend.answer(_pairwise('a', 'b', 'a')) == YES
    assert backend.answer(_pointwise('c', '1.0')) == '5.0'
    assert backend.answer(_pointwise('a', '5.0')) == '1.0'


def test_noisy_backend():
    truth = gateway.GroundTruth(ratings={'1': {'a': 4.0}})
    config = gateway.BackendConfig(kind='mock-noisy', seed=2)
    backend = gateway.get_backend(config, truth)
    # a hint equal to the true rating is copied
    assert backend.answer(_pointwise('a', '4.0')) == '4.0'
    guess = backend.answer(_pointwise('b', '4.0'))
    assert 1.0 <= float(guess) <= 5.0
    assert guess == backend.answer(_pointwise('b', '4.0'))
    assert config.backend_id == 'mock-noisy:2'


def test_backend_config_errors():
    config = gateway.BackendConfig(kind='http-chat', concurrency=0)
    assert [key for key, _ in config.errors()] == \
        ['endpoint', 'model', 'concurrency']
    assert gateway.BackendConfig(kind='gpt').errors() == [
        ('kind', "unknown backend 'gpt'")]


def test_generation_params_errors():
    params = gateway.GenerationParams(top_p=0, top_k=0)
    assert [key for key, _ in params.errors()] == ['top_p', 'top_k']
    assert params.hash != PARAMS.hash
