import hashlib
import json
import os
import tempfile
from typing import Any, Iterable, Iterator

import numpy as np
from django.core.serializers.json import DjangoJSONEncoder


def canonical_json(data: Any) -> str:
    """ Serialization used for hashing: equal values give equal text """
    return json.dumps(
        data, sort_keys=True, separators=(',', ':'), cls=DjangoJSONEncoder,
        ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def config_hash(data: Any) -> str:
    return sha256_text(canonical_json(data))


def file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def dir_hash(path: str) -> str:
    """Hash of a directory tree: relative names and file contents."""
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            digest.update(os.path.relpath(full, path).encode('utf-8'))
            digest.update(file_hash(full).encode('ascii'))
    return digest.hexdigest()


def id_sort_key(item_id: str) -> tuple:
    # numeric ids sort numerically, everything else lexicographically
    text = str(item_id)
    if text.isdigit():
        return 0, int(text), text
    return 1, 0, text


def derive_rng(seed: int, *keys: Any) -> np.random.Generator:
    """
    Generator for a sub-task, independent of python hash salting: the same
    (seed, keys) always gives the same stream.
    """
    material = canonical_json([seed, *[str(k) for k in keys]])
    words = np.frombuffer(
        hashlib.sha256(material.encode('utf-8')).digest(), dtype='<u4')
    return np.random.default_rng(words.tolist())


def atomic_write_text(path: str, text: str):
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=folder, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def dumps_line(record: dict) -> str:
    return json.dumps(
        record, sort_keys=True, ensure_ascii=False, cls=DjangoJSONEncoder)


def write_jsonl(path: str, records: Iterable[dict]):
    atomic_write_text(path, ''.join(dumps_line(r) + '\n' for r in records))


def read_jsonl(path: str) -> Iterator[dict]:
    with open(path, encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(path: str, data: Any):
    atomic_write_text(
        path,
        json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False,
                   cls=DjangoJSONEncoder) + '\n')


def read_json(path: str) -> Any:
    with open(path, encoding='utf-8') as f:
        return json.load(f)
