import logging
import os

import httpx
from tenacity import (
    AsyncRetrying, RetryError, retry_if_exception_type, stop_after_attempt,
    wait_exponential)

from recrank.exceptions import CompletionFailed, TransientBackendError
from recrank.gateway.base import AbstractBackend

logger = logging.getLogger(__name__)

TRANSIENT_STATUS = (429, 500, 502, 503, 504)
MAX_WAIT = 60


class HttpChatBackend(AbstractBackend):
    """
    Chat-completions client. Transient failures (429, 5xx, connection
    errors) are retried with exponential backoff; anything else fails the
    request at once.
    """

    def __init__(self, config, truth=None, transport=None):
        super().__init__(config, truth)
        headers = {}
        token = os.environ.get(config.token_env or '')
        if token:
            headers['Authorization'] = f'Bearer {token}'
        self.client = httpx.AsyncClient(
            base_url=config.endpoint, timeout=config.timeout,
            headers=headers, transport=transport)
        self.top_k_enabled = config.supports_top_k

    def request_body(self, prompt, params):
        body = super().request_body(prompt, params)
        if not self.top_k_enabled:
            body.pop('top_k', None)
        return body

    def _rejects_top_k(self, response: httpx.Response, body: dict) -> bool:
        return (response.status_code == 400 and 'top_k' in body
                and 'top_k' in response.text)

    async def _post(self, body: dict) -> str:
        try:
            response = await self.client.post('chat/completions', json=body)
        except httpx.TransportError as e:
            raise TransientBackendError(f'{type(e).__name__}: {e}') from e
        if self._rejects_top_k(response, body):
            if self.top_k_enabled:
                logger.warning(
                    '%s rejects top_k, sending requests without it',
                    self.backend_id)
            self.top_k_enabled = False
            body = {k: v for k, v in body.items() if k != 'top_k'}
            return await self._post(body)
        if response.status_code in TRANSIENT_STATUS:
            raise TransientBackendError(
                f'HTTP {response.status_code}: {response.text[:200]}')
        if response.status_code != 200:
            raise CompletionFailed(
                f'HTTP {response.status_code}: {response.text[:200]}')
        try:
            return response.json()['choices'][0]['message']['content']
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise CompletionFailed(f'malformed completion payload: {e}') from e

    async def complete_text(self, prompt, params):
        attempts = 0
        retrying = AsyncRetrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(
                multiplier=self.config.backoff, max=MAX_WAIT),
            retry=retry_if_exception_type(TransientBackendError),
            reraise=False)
        try:
            async for attempt in retrying:
                with attempt:
                    attempts += 1
                    text = await self._post(self.request_body(prompt, params))
        except RetryError as e:
            raise CompletionFailed(
                f'gave up after {attempts} attempts: '
                f'{e.last_attempt.exception()}', attempts) from e
        except CompletionFailed as e:
            e.attempts = attempts
            raise
        return text, attempts

    async def close(self):
        await self.client.aclose()
