"""
Content-addressed stage artifacts.

Layout under the cache root::

    <stage>/<key>/        finished artifact directory
    <stage>/<key>.json    completion marker, written after the rename

A directory without its marker is an interrupted build and is rebuilt.
"""
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from typing import Callable, Mapping

from recrank.utils import config_hash, dir_hash, read_json, write_json

logger = logging.getLogger(__name__)


@dataclass
class StageArtifact:
    stage: str
    key: str
    path: str
    output_hash: str
    cached: bool = False

    def file(self, *names: str) -> str:
        return os.path.join(self.path, *names)

    def as_dict(self) -> dict:
        return {
            'key': self.key,
            'path': self.path,
            'output_hash': self.output_hash,
            'cached': self.cached,
        }


class StageCache:
    def __init__(self, root: str):
        self.root = root

    def __repr__(self):
        return f'{self.__class__.__name__}({self.root!r})'

    @staticmethod
    def key(stage: str, inputs: Mapping[str, str], section) -> str:
        return config_hash(
            {'stage': stage, 'inputs': dict(inputs), 'config': section})

    def path(self, stage: str, key: str) -> str:
        return os.path.join(self.root, stage, key)

    def _marker(self, stage: str, key: str) -> str:
        return os.path.join(self.root, stage, f'{key}.json')

    def lookup(self, stage: str, key: str) -> StageArtifact | None:
        marker = self._marker(stage, key)
        path = self.path(stage, key)
        if not (os.path.exists(marker) and os.path.isdir(path)):
            return None
        return StageArtifact(
            stage, key, path, read_json(marker)['output_hash'], cached=True)

    def build(self, stage: str, key: str,
              producer: Callable[[str], None]) -> StageArtifact:
        """
        Run ``producer`` on a fresh temporary directory and publish it with
        a rename. Readers never see a partial artifact.
        """
        folder = os.path.join(self.root, stage)
        os.makedirs(folder, exist_ok=True)
        final = self.path(stage, key)
        tmp = tempfile.mkdtemp(dir=folder, prefix=f'.tmp-{key[:12]}-')
        try:
            producer(tmp)
            output_hash = dir_hash(tmp)
            if os.path.isdir(final):
                # leftover of an interrupted build: no marker was written
                shutil.rmtree(final)
            os.rename(tmp, final)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        write_json(self._marker(stage, key), {
            'stage': stage, 'key': key, 'output_hash': output_hash})
        return StageArtifact(stage, key, final, output_hash)

    def verify(self, artifact: StageArtifact) -> bool:
        """ Recompute the artifact hash and compare with the marker """
        actual = dir_hash(artifact.path)
        if actual != artifact.output_hash:
            logger.warning('%s artifact %s changed on disk',
                           artifact.stage, artifact.key[:12])
            return False
        return True
