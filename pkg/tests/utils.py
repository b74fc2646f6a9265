import os

import numpy as np
import pandas as pd

from recrank.dataset import interactions_frame, temporal_split
from recrank.recommenders import EmbeddingModel
from recrank.ranklist import INFER, RankingList


def write_generic_dataset(folder: str, n_users: int = 50, n_items: int = 40,
                          per_user: int = 14, seed: int = 0) -> str:
    """
    ``ratings.tsv`` plus ``items.tsv`` in the generic format. Every user
    rates ``per_user`` items; the five oldest ratings are 4 or 5 so each
    user has liked train items.
    """
    os.makedirs(folder, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for user in range(1, n_users + 1):
        items = rng.choice(n_items, size=per_user, replace=False) + 1
        for n, item in enumerate(items):
            rating = rng.integers(4, 6) if n < 5 else rng.integers(1, 6)
            timestamp = 1_000_000 + user * 1000 + n * 7
            lines.append(f'{user}\t{item}\t{rating}\t{timestamp}\n')
    path = os.path.join(folder, 'ratings.tsv')
    with open(path, 'w', encoding='utf-8') as f:
        f.writelines(lines)
    pd.DataFrame({
        'item_id': range(1, n_items + 1),
        'title': [f'Title {i} ({1970 + i})' for i in range(1, n_items + 1)],
    }).to_csv(os.path.join(folder, 'items.tsv'), sep='\t', index=False)
    return path


def pipeline_config(work_dir: str, raw: str, **sections) -> dict:
    """ A small, fast mock-backend run over ``write_generic_dataset`` """
    config = {
        'seed': 7,
        'work_dir': work_dir,
        'dataset': {'tag': 'generic-tsv', 'raw': raw},
        'recommender': {
            'model': 'mf', 'dim': 8, 'epochs': 3, 'batch_size': 128,
            'lr': 0.01,
        },
        'sampling': {'strategy': 'composite', 'n_samples': 20, 'k': 4},
        'ranklist': {'n': 8, 'n_pos': 2},
        'prompts': {'history_liked': 5, 'history_disliked': 5},
        'backend': {'kind': 'mock-echo-hint', 'concurrency': 4},
    }
    for name, values in sections.items():
        config[name] = {**config.get(name, {}), **values}
    return config


def make_split(rows):
    """ rows of (user, item, rating, timestamp) """
    return temporal_split(interactions_frame(
        [(str(u), str(i), float(r), ts, False) for u, i, r, ts in rows]))


def make_model(user_vectors: dict, item_vectors: dict,
               tag: str = 'mf') -> EmbeddingModel:
    return EmbeddingModel(
        tag, list(user_vectors), list(item_vectors),
        np.array(list(user_vectors.values()), float),
        np.array(list(item_vectors.values()), float))


def infer_list(user_id, order, scores=None, test_item=None) -> RankingList:
    return RankingList(
        str(user_id), list(order), INFER, hint_order=list(order),
        scores=dict(scores or {}), test_item=test_item)
