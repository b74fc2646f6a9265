import asyncio
import logging
import time
from typing import Sequence

from recrank.exceptions import CompletionFailed
from recrank.gateway.base import (
    FAILED, AbstractBackend, CompletionResult, GenerationParams, Transcript,
    prompt_hash)
from recrank.gateway.transcript import TranscriptLog
from recrank.prompts import PromptInstance
from recrank.signals import request_failed, request_finished

logger = logging.getLogger(__name__)


async def complete(prompt: PromptInstance, params: GenerationParams,
                   backend: AbstractBackend,
                   log: TranscriptLog | None = None) -> CompletionResult:
    """
    One completion. Failures come back as a result carrying ``error``;
    no text is ever made up for a failed request.
    """
    key = (prompt_hash(prompt), params.hash, backend.backend_id)
    if log is not None:
        cached = log.lookup(key)
        if cached is not None:
            return CompletionResult(
                prompt, cached.response, cached, cached=True)
        if log.replay_only:
            error = f'prompt {key[0][:12]} is not in the replay log'
            request_failed.send(
                sender=backend.__class__, prompt=prompt, error=error)
            return CompletionResult(prompt, None, None, error)

    start = time.monotonic()
    try:
        text, attempts = await backend.complete_text(prompt, params)
        error = None
    except CompletionFailed as e:
        text, attempts, error = None, e.attempts, str(e)
    transcript = Transcript(
        *key, backend.request_body(prompt, params), text,
        round((time.monotonic() - start) * 1000, 3), attempts)
    if error is not None:
        transcript.status, transcript.error = FAILED, error
    if log is not None:
        await log.record(transcript)
    if error is not None:
        request_failed.send(
            sender=backend.__class__, prompt=prompt, error=error,
            transcript=transcript)
    else:
        request_finished.send(
            sender=backend.__class__, prompt=prompt, transcript=transcript)
    return CompletionResult(prompt, text, transcript, error)


async def batch_complete(prompts: Sequence[PromptInstance],
                         params: GenerationParams, backend: AbstractBackend,
                         log: TranscriptLog | None = None,
                         concurrency: int | None = None) -> list:
    """ Results in input order, at most ``concurrency`` requests in flight """
    semaphore = asyncio.Semaphore(
        concurrency or backend.config.concurrency)

    async def bounded(prompt):
        async with semaphore:
            return await complete(prompt, params, backend, log)

    results = await asyncio.gather(*(bounded(p) for p in prompts))
    failed = sum(not r.ok for r in results)
    if failed:
        logger.warning('%s of %s completions failed', failed, len(results))
    return list(results)


def run_batch(prompts: Sequence[PromptInstance], params: GenerationParams,
              backend: AbstractBackend, log: TranscriptLog | None = None,
              concurrency: int | None = None) -> list:
    async def main():
        try:
            return await batch_complete(
                prompts, params, backend, log, concurrency)
        finally:
            await backend.close()

    return asyncio.run(main())
