import copy
import json
from typing import Any

from django.conf import settings

DEFAULTS = {
    'seed': 2024,
    'work_dir': 'recrank_work',
    'dataset': {
        'tag': 'ml-100k',
        'raw': None,
        'k_core': None,
        'malformed_threshold': 0,
        'force_timestamps': False,
        'like_threshold': None,
        'dislike_threshold': None,
    },
    'recommender': {
        'model': 'mf',
        'dim': 64,
        'lr': 1e-3,
        'epochs': 200,
        'batch_size': 2048,
        'negatives': 1,
        'layers': 3,
        'eps': 0.1,
        'cl_weight': 0.2,
        'temperature': 0.2,
        'contrast_layer': 1,
        'reg': 1e-4,
    },
    'sampling': {
        'strategy': 'composite',
        'clustering': 'kmeans',
        'n_samples': 100,
        'penalty_c': 0.9,
        'k': 10,
        'eps': 0.5,
        'min_pts': 5,
        'embeddings': 'model',
    },
    'ranklist': {
        'n': 10,
        'n_pos': 3,
    },
    'prompts': {
        'kinds': ['listwise', 'pointwise', 'pointwise_fix', 'pairwise'],
        'history_liked': 20,
        'history_disliked': 20,
        'context_budget': 2048,
        'pair_schedule': 'adjacent',
        'hint_source': 'model',
        'mix': {
            'listwise': 1 / 3, 'pointwise': 1 / 3, 'pairwise': 1 / 3,
        },
        'templates': {},
    },
    'backend': {
        'kind': 'mock-echo-hint',
        'endpoint': None,
        'model': None,
        'token_env': 'RECRANK_API_TOKEN',
        'timeout': 60.0,
        'max_retries': 3,
        'backoff': 1.0,
        'concurrency': 8,
        'supports_top_k': True,
        'replay': None,
        'script': {},
        'seed': 0,
    },
    'generation': {
        'temperature': 0.1,
        'top_k': 40,
        'top_p': 0.1,
        'max_tokens': 256,
    },
    'weights': {
        'alpha': [1 / 3, 1 / 3, 1 / 3],
        'c1': 0.1,
        'c2': 0.1,
        'c3': 0.1,
        'pairwise_mode': 'constant',
    },
    'parser': {
        'fuzzy_threshold': 0.9,
        'fallback': 'hint',
    },
    'evaluation': {
        'ks': [3, 5],
        'alpha': 0.05,
        'full_catalog': False,
        'max_users': None,
        'variants': [
            'pointwise', 'pointwise_fix', 'pairwise', 'listwise', 'hybrid',
            'hybrid_fix',
        ],
    },
}


def deep_merge(base: dict, override: dict | None) -> dict:
    result = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def get_config(overrides: dict | None = None) -> dict:
    """
    Package defaults <- settings.RECRANK <- per-run overrides.
    """
    config = deep_merge(DEFAULTS, getattr(settings, 'RECRANK', {}))
    return deep_merge(config, overrides)


def load_config_file(path: str) -> dict:
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def set_dotted(config: dict, key: str, value: Any) -> dict:
    """ Copy of config with a.b.c = value, used by sweeps """
    result = copy.deepcopy(config)
    node = result
    *parents, last = key.split('.')
    for name in parents:
        node = node.setdefault(name, {})
    node[last] = value
    return result
