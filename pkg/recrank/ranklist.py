import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import pandas as pd

from recrank.dataset import FIVE_POINT, DatasetSplit, RatingScale
from recrank.exceptions import RankListError
from recrank.recommenders import EmbeddingModel, predict_scores, top_k_unseen
from recrank.utils import derive_rng, id_sort_key, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

TRAIN = 'train'
INFER = 'infer'


@dataclass
class RankingList:
    user_id: str
    items: list
    phase: str
    positives: list = field(default_factory=list)
    hint_order: list = field(default_factory=list)
    gold_order: list = field(default_factory=list)
    # initial-model score per listed item, when a model was involved
    scores: dict = field(default_factory=dict)
    test_item: str | None = None

    def __post_init__(self):
        if len(set(self.items)) != len(self.items):
            raise RankListError(f'user {self.user_id}: duplicate items')
        if not self.hint_order:
            self.hint_order = list(self.items)
        if sorted(self.hint_order) != sorted(self.items):
            raise RankListError(
                f'user {self.user_id}: hint order is not a permutation')

    def __len__(self):
        return len(self.items)

    @property
    def positive_mask(self) -> list:
        positives = set(self.positives)
        return [item in positives for item in self.items]

    def hint_rank(self, item_id) -> int:
        """ 1-based position in the initial model's order """
        return self.hint_order.index(item_id) + 1

    def as_dict(self) -> dict:
        record = asdict(self)
        record['positive_mask'] = self.positive_mask
        return record

    @classmethod
    def from_dict(cls, record: dict) -> 'RankingList':
        record = {k: v for k, v in record.items() if k != 'positive_mask'}
        return cls(**record)


def _ordered_positives(history: pd.DataFrame, items: Iterable) -> list:
    """ rating desc, then most recent first, then item id """
    rows = history[history['item_id'].isin(set(items))]
    ordered = sorted(
        rows.itertuples(index=False),
        key=lambda r: (
            -float(r.rating),
            -(int(r.timestamp) if pd.notna(r.timestamp) else 0),
            id_sort_key(r.item_id)))
    return [r.item_id for r in ordered]


def build_train_list(user_id, split: DatasetSplit, n: int, n_pos: int,
                     seed: int, scale: RatingScale = FIVE_POINT,
                     model: EmbeddingModel | None = None,
                     draw: int = 0) -> RankingList:
    """
    ``n_pos`` liked train items plus ``n - n_pos`` uniformly drawn
    unobserved items, shuffled. Raises RankListError when the user lacks
    positives or negatives; callers skip such users. A user drawn several
    times gets one independently sampled list per ``draw``.
    """
    user_id = str(user_id)
    if not 0 < n_pos <= n:
        raise RankListError(f'need 0 < n_pos <= n, got {n_pos}/{n}')
    history = split.history(user_id)
    liked = sorted(
        history.loc[history['rating'] >= scale.like, 'item_id'],
        key=id_sort_key)
    if len(liked) < n_pos:
        raise RankListError(
            f'user {user_id}: {len(liked)} liked items, need {n_pos}')
    excluded = set(history['item_id'])
    test_item = split.per_user_test_item.get(user_id)
    if test_item is not None:
        excluded.add(test_item)
    pool = [i for i in split.items if i not in excluded]
    if len(pool) < n - n_pos:
        raise RankListError(
            f'user {user_id}: {len(pool)} unobserved items, '
            f'need {n - n_pos} negatives')
    rng = derive_rng(seed, 'train-list', user_id, draw)
    positives = [liked[i] for i in sorted(
        rng.choice(len(liked), size=n_pos, replace=False))]
    negatives = [pool[i] for i in
                 rng.choice(len(pool), size=n - n_pos, replace=False)]
    items = positives + negatives
    items = [items[i] for i in rng.permutation(len(items))]
    gold = _ordered_positives(history, positives) + negatives

    scores, hint = {}, items
    if model is not None:
        all_scores = _known_scores(model, user_id)
        if all_scores is not None:
            scores = {i: all_scores[i] for i in items if i in all_scores}
            hint = sorted(items, key=lambda i: (
                i not in scores, -scores.get(i, 0.0), id_sort_key(i)))
    return RankingList(
        user_id, items, TRAIN, positives, hint, gold, scores, test_item)


def _known_scores(model: EmbeddingModel, user_id) -> dict | None:
    if user_id not in model.user_index:
        return None
    return predict_scores(model, user_id)


def build_infer_list(user_id, model: EmbeddingModel, split: DatasetSplit,
                     n: int) -> RankingList:
    user_id = str(user_id)
    items = top_k_unseen(model, user_id, n, split.seen.get(user_id, ()))
    scores = predict_scores(model, user_id)
    return RankingList(
        user_id, items, INFER, hint_order=list(items),
        scores={i: scores[i] for i in items},
        test_item=split.per_user_test_item.get(user_id))


def scaled_hint_scores(ranking: RankingList, low: float = 1.0,
                       high: float = 5.0) -> dict:
    """
    Min-max map of the initial scores onto [low, high]; a constant list
    maps to the midpoint.
    """
    if not ranking.items or any(
            i not in ranking.scores for i in ranking.items):
        return {}
    values = np.array([ranking.scores[i] for i in ranking.items], float)
    span = values.max() - values.min()
    if span == 0:
        scaled = np.full(len(values), (low + high) / 2)
    else:
        scaled = low + (values - values.min()) * (high - low) / span
    return {i: round(float(s), 1) for i, s in zip(ranking.items, scaled)}


def build_train_lists(users: Iterable, split: DatasetSplit, n: int,
                      n_pos: int, seed: int, scale: RatingScale = FIVE_POINT,
                      model: EmbeddingModel | None = None) -> list:
    """ One list per draw; repeated users get fresh samples """
    result, draws, skipped = [], {}, set()
    for user_id in (str(u) for u in users):
        if user_id in skipped:
            continue
        draw = draws[user_id] = draws.get(user_id, -1) + 1
        try:
            result.append(build_train_list(
                user_id, split, n, n_pos, seed, scale, model, draw))
        except RankListError as e:
            skipped.add(user_id)
            logger.info('skipping train list: %s', e)
    return result


def build_infer_lists(users: Iterable, model: EmbeddingModel,
                      split: DatasetSplit, n: int) -> list:
    result = []
    for user_id in users:
        try:
            result.append(build_infer_list(user_id, model, split, n))
        except RankListError as e:
            logger.warning('skipping inference list: %s', e)
    return result


def write_lists(path: str, lists: Iterable[RankingList]):
    write_jsonl(path, (ranking.as_dict() for ranking in lists))


def read_lists(path: str) -> list:
    return [RankingList.from_dict(r) for r in read_jsonl(path)]
