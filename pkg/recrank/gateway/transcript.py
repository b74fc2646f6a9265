import asyncio
import logging
import os

from recrank.gateway.base import OK, Transcript
from recrank.utils import dumps_line, read_jsonl

logger = logging.getLogger(__name__)


class TranscriptLog:
    """
    Append-only JSONL record of every request. Successful records double
    as a cache keyed by (prompt hash, params hash, backend id). With a
    replay source the log answers from the cache only.
    """

    def __init__(self, path: str | None = None, replay: str | None = None):
        self.path = path
        self.replay = replay
        self.cache: dict[tuple, Transcript] = {}
        self._lock = None
        self._lock_loop = None
        for source in (replay, path):
            if source and os.path.exists(source):
                self._load(source)

    def __len__(self):
        return len(self.cache)

    @property
    def replay_only(self) -> bool:
        return self.replay is not None

    def _load(self, source: str):
        loaded = 0
        for record in read_jsonl(source):
            transcript = Transcript.from_dict(record)
            if transcript.status == OK:
                self.cache[transcript.key] = transcript
                loaded += 1
        logger.info('loaded %s cached completions from %s', loaded, source)

    def lookup(self, key: tuple) -> Transcript | None:
        return self.cache.get(key)

    def _loop_lock(self) -> asyncio.Lock:
        loop = asyncio.get_running_loop()
        if self._lock_loop is not loop:
            self._lock, self._lock_loop = asyncio.Lock(), loop
        return self._lock

    async def record(self, transcript: Transcript):
        async with self._loop_lock():
            if transcript.status == OK:
                self.cache[transcript.key] = transcript
            if self.path:
                folder = os.path.dirname(os.path.abspath(self.path))
                os.makedirs(folder, exist_ok=True)
                with open(self.path, 'a', encoding='utf-8') as f:
                    f.write(dumps_line(transcript.as_dict()) + '\n')
