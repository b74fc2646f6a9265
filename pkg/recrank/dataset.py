"""
Dataset ingestion, k-core filtering, preference labels and temporal
splits. Interaction lists are pandas frames with the columns of
``COLUMNS``; ids are kept as opaque strings.
"""
import logging
import os
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np
import pandas as pd
from django.utils.functional import cached_property

from recrank.exceptions import (
    DatasetError, MalformedRowsError, MissingTitleError, TimestampError)
from recrank.utils import id_sort_key, write_json, read_json

logger = logging.getLogger(__name__)

COLUMNS = ['user_id', 'item_id', 'rating', 'timestamp', 'simulated_ts']
RAW_COLUMNS = ['user_id', 'item_id', 'rating', 'timestamp']
# simulated timestamps are drawn without replacement from [1, 2**31 - 1]
TIMESTAMP_RANGE = 2 ** 31 - 1
_BAD_ROW = '\x00bad-row'

LIKED = 'liked'
DISLIKED = 'disliked'
NEUTRAL = 'neutral'


class RatingScale(NamedTuple):
    low: float
    high: float
    like: float
    dislike: float

    def contains(self, rating) -> bool:
        return self.low <= rating <= self.high

    def to_five_point(self, rating: float) -> float:
        """ Map a rating onto the 1..5 scale used by pointwise prompts """
        if self.low == 1 and self.high == 5:
            return float(rating)
        return 1.0 + (rating - self.low) * 4.0 / (self.high - self.low)


FIVE_POINT = RatingScale(1, 5, 4, 2)
TEN_POINT = RatingScale(1, 10, 7, 4)


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    rating: float
    timestamp: int | None = None
    simulated_ts: bool = False


class DatasetStats(NamedTuple):
    n_users: int
    n_items: int
    n_interactions: int
    density: float

    def as_dict(self):
        return self._asdict()


class Catalog:
    """ item_id -> title, plus optional per-item metadata """

    def __init__(self, titles: dict | None = None,
                 metadata: dict | None = None):
        self.titles = {}
        for item_id, title in (titles or {}).items():
            if isinstance(title, str) and title.strip():
                self.titles[str(item_id)] = ' '.join(title.split())
        self.metadata = metadata or {}

    def __len__(self):
        return len(self.titles)

    def __contains__(self, item_id):
        return str(item_id) in self.titles

    def __repr__(self):
        return f'{self.__class__.__name__}: {len(self)} titles'

    def title(self, item_id) -> str:
        try:
            return self.titles[str(item_id)]
        except KeyError:
            raise MissingTitleError(item_id) from None

    def missing(self, item_ids: Iterable) -> list:
        return sorted(
            {str(i) for i in item_ids if str(i) not in self.titles},
            key=id_sort_key)

    def restrict(self, item_ids: Iterable) -> 'Catalog':
        keep = {str(i) for i in item_ids}
        return Catalog(
            {k: v for k, v in self.titles.items() if k in keep},
            {k: v for k, v in self.metadata.items() if k in keep})

    def write(self, path: str):
        frame = pd.DataFrame(
            sorted(self.titles.items(), key=lambda x: id_sort_key(x[0])),
            columns=['item_id', 'title'])
        frame.to_csv(path, sep='\t', index=False)

    @classmethod
    def read(cls, path: str) -> 'Catalog':
        frame = pd.read_csv(
            path, sep='\t', dtype=str, keep_default_na=False)
        return cls(dict(zip(frame['item_id'], frame['title'])))


class DatasetFormat(NamedTuple):
    tag: str
    raw_file: str
    scale: RatingScale
    domain: tuple[str, str]
    has_timestamps: bool
    default_k_core: int
    reader: Callable
    # density over max item id instead of observed items
    full_item_universe: bool = False
    # files next to the raw file the reader also consumes
    sidecars: tuple = ()


def interactions_frame(rows: Iterable = ()) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=COLUMNS)
    return _typed(frame)


def _typed(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.copy()
    frame['user_id'] = frame['user_id'].astype(str)
    frame['item_id'] = frame['item_id'].astype(str)
    frame['rating'] = frame['rating'].astype(float)
    frame['timestamp'] = pd.array(frame['timestamp'], dtype='Int64')
    frame['simulated_ts'] = frame['simulated_ts'].fillna(False).astype(bool)
    return frame.reset_index(drop=True)


def _read_rows(path, sep, names, header=False, encoding='utf-8'):
    """
    Read a delimited file as strings. Rows keep their source line number
    so diagnostics can point at them.
    """
    def bad_line(_fields):
        return [_BAD_ROW] + [''] * (len(names) - 1)

    try:
        frame = pd.read_csv(
            path, sep=sep, header=None, names=names, dtype=str,
            engine='python', encoding=encoding,
            skiprows=1 if header else 0, skip_blank_lines=False,
            keep_default_na=False, on_bad_lines=bad_line)
    except pd.errors.EmptyDataError:
        frame = pd.DataFrame(columns=names, dtype=str)
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetError(f'cannot read {path}: {e}') from e
    frame = frame.fillna('')
    frame['line'] = np.arange(len(frame)) + (2 if header else 1)
    blank = (frame[names] == '').all(axis=1)
    return frame[~blank]


def _coerce(frame, path, scale, has_timestamps, threshold):
    """ Turn raw string rows into a typed interaction frame """
    rating = pd.to_numeric(frame['rating'], errors='coerce')
    if has_timestamps:
        timestamp = pd.to_numeric(frame['timestamp'], errors='coerce')
    else:
        timestamp = pd.Series(np.nan, index=frame.index)
    problems = pd.Series('', index=frame.index)
    problems[(frame['user_id'] == '') | (frame['item_id'] == '')] = \
        'missing user or item id'
    problems[rating.isna()] = 'rating is not a number'
    problems[rating.notna() & ~rating.between(scale.low, scale.high)] = \
        f'rating outside {scale.low:g}-{scale.high:g}'
    if has_timestamps:
        bad_ts = timestamp.isna() | (timestamp <= 0) | (
            timestamp != timestamp.round())
        problems[bad_ts] = 'timestamp is not a positive integer'
    problems[frame['user_id'] == _BAD_ROW] = 'wrong number of fields'
    bad = problems != ''
    diagnostics = [
        f'line {line}: {problem}'
        for line, problem in zip(frame.loc[bad, 'line'], problems[bad])]
    if len(diagnostics) > threshold:
        raise MalformedRowsError(path, diagnostics, threshold)
    for message in diagnostics:
        logger.warning('%s: rejected %s', path, message)
    good = ~bad
    return _typed(pd.DataFrame({
        'user_id': frame.loc[good, 'user_id'].str.strip(),
        'item_id': frame.loc[good, 'item_id'].str.strip(),
        'rating': rating[good],
        'timestamp': timestamp[good].astype('Int64') if has_timestamps
        else pd.array([pd.NA] * int(good.sum()), dtype='Int64'),
        'simulated_ts': False,
    }))


def _dedup(frame: pd.DataFrame) -> pd.DataFrame:
    """ Collapse repeated (user, item) pairs keeping the latest one """
    frame = frame.assign(_order=np.arange(len(frame)))
    latest = frame.sort_values(
        ['timestamp', '_order'], na_position='first', kind='mergesort'
    ).drop_duplicates(['user_id', 'item_id'], keep='last')
    dropped = len(frame) - len(latest)
    if dropped:
        logger.info('collapsed %s duplicate (user, item) rows', dropped)
    return latest.sort_values('_order').drop(columns='_order').reset_index(
        drop=True)


def _sibling(path, name):
    return os.path.join(os.path.dirname(os.path.abspath(path)), name)


def _read_titles(path, sep, encoding='utf-8', header=False, columns=(0, 1)):
    if not os.path.exists(path):
        logger.warning('no title file %s', path)
        return {}
    frame = pd.read_csv(
        path, sep=sep, header=0 if header else None, usecols=list(columns),
        dtype=str, encoding=encoding, engine='python', keep_default_na=False,
        on_bad_lines='skip')
    return dict(zip(frame.iloc[:, 0], frame.iloc[:, 1]))


def _read_ml_100k(path, threshold, scale):
    rows = _read_rows(path, '\t', RAW_COLUMNS, encoding='latin-1')
    titles = _read_titles(_sibling(path, 'u.item'), r'\|', 'latin-1')
    return _coerce(rows, path, scale, True, threshold), titles


def _read_ml_1m(path, threshold, scale):
    rows = _read_rows(path, '::', RAW_COLUMNS, encoding='latin-1')
    titles = _read_titles(_sibling(path, 'movies.dat'), '::', 'latin-1')
    return _coerce(rows, path, scale, True, threshold), titles


def _read_bookcrossing(path, threshold, scale):
    rows = _read_rows(
        path, ';', RAW_COLUMNS[:3], header=True, encoding='latin-1')
    # a zero rating marks implicit feedback, not a score on the 1-10 scale
    implicit = rows['rating'].str.strip() == '0'
    if implicit.any():
        logger.info('%s: dropped %s implicit rows', path, int(implicit.sum()))
    rows = rows[~implicit].assign(timestamp='')
    titles = _read_titles(
        _sibling(path, 'BX-Books.csv'), ';', 'latin-1', header=True)
    return _coerce(rows, path, scale, False, threshold), titles


def _read_amazon_music(path, threshold, scale):
    rows = _read_rows(path, ',', RAW_COLUMNS)
    meta_path = _sibling(path, 'meta.jsonl')
    if os.path.exists(meta_path):
        meta = pd.read_json(meta_path, lines=True, dtype=False)
        titles = dict(zip(meta['asin'].astype(str), meta['title']))
    else:
        titles = _read_titles(_sibling(path, 'items.tsv'), '\t', header=True)
    return _coerce(rows, path, scale, True, threshold), titles


def _read_generic_tsv(path, threshold, scale):
    rows = _read_rows(path, '\t', RAW_COLUMNS)
    titles = _read_titles(_sibling(path, 'items.tsv'), '\t', header=True)
    return _coerce(rows, path, scale, True, threshold), titles


FORMATS = {
    f.tag: f for f in (
        DatasetFormat('ml-100k', 'u.data', FIVE_POINT, ('movie', 'movies'),
                      True, 1, _read_ml_100k, sidecars=('u.item',)),
        DatasetFormat('ml-1m', 'ratings.dat', FIVE_POINT,
                      ('movie', 'movies'), True, 1, _read_ml_1m,
                      full_item_universe=True, sidecars=('movies.dat',)),
        DatasetFormat('bookcrossing', 'BX-Book-Ratings.csv', TEN_POINT,
                      ('book', 'books'), False, 10, _read_bookcrossing,
                      sidecars=('BX-Books.csv',)),
        DatasetFormat('amazon-music', 'ratings.csv', FIVE_POINT,
                      ('music', 'music'), True, 10, _read_amazon_music,
                      sidecars=('meta.jsonl', 'items.tsv')),
        DatasetFormat('generic-tsv', 'ratings.tsv', FIVE_POINT,
                      ('movie', 'movies'), True, 1, _read_generic_tsv,
                      sidecars=('items.tsv',)),
    )
}


def get_format(tag: str) -> DatasetFormat:
    try:
        return FORMATS[tag]
    except KeyError:
        raise DatasetError(
            f'unknown dataset format {tag!r}, expected one of '
            f'{", ".join(FORMATS)}') from None


def load_raw(path: str, fmt: str, malformed_threshold: int = 0,
             scale: RatingScale | None = None):
    """
    Parse a raw dataset file into (interactions, catalog). Rows that do not
    parse are rejected with line-numbered diagnostics; more than
    ``malformed_threshold`` of them aborts the load. Interactions on items
    without a title are dropped, so the catalog covers every item.
    """
    dataset_format = get_format(fmt)
    if os.path.isdir(path):
        path = os.path.join(path, dataset_format.raw_file)
    if not os.path.isfile(path):
        raise DatasetError(f'no such file: {path}')
    frame, titles = dataset_format.reader(
        path, malformed_threshold, scale or dataset_format.scale)
    frame = _dedup(frame)
    catalog = Catalog(titles).restrict(frame['item_id'].unique())
    missing = catalog.missing(frame['item_id'].unique())
    if missing:
        untitled = frame['item_id'].isin(missing)
        logger.warning(
            '%s: dropped %s interactions on %s items without title, '
            'e.g. %s', path, int(untitled.sum()), len(missing),
            ', '.join(missing[:5]))
        frame = frame[~untitled].reset_index(drop=True)
        if frame.empty:
            raise DatasetError(f'{path}: no rated item has a title')
    logger.info(
        'loaded %s interactions from %s (%s)', len(frame), path, fmt)
    return frame, catalog


def k_core_filter(interactions: pd.DataFrame, k: int) -> pd.DataFrame:
    """ Largest subgraph where every user and item has >= k interactions """
    if k < 1:
        raise DatasetError(f'k-core needs k >= 1, got {k}')
    current = interactions
    while True:
        user_counts = current['user_id'].map(
            current['user_id'].value_counts())
        item_counts = current['item_id'].map(
            current['item_id'].value_counts())
        keep = (user_counts >= k) & (item_counts >= k)
        if keep.all():
            return current.reset_index(drop=True)
        current = current[keep]


def simulate_timestamps(interactions: pd.DataFrame, seed: int,
                        force: bool = False) -> pd.DataFrame:
    real = interactions['timestamp'].notna() & ~interactions['simulated_ts']
    if real.any() and not force:
        raise TimestampError(
            f'{int(real.sum())} interactions already carry real timestamps')
    rng = np.random.default_rng(seed)
    values = rng.choice(
        TIMESTAMP_RANGE, size=len(interactions), replace=False) + 1
    result = interactions.copy()
    result['timestamp'] = pd.array(values, dtype='Int64')
    result['simulated_ts'] = True
    return result


@dataclass
class DatasetSplit:
    train: pd.DataFrame
    test: pd.DataFrame
    per_user_test_item: dict

    @cached_property
    def seen(self) -> dict:
        """ user_id -> set of train items """
        return {
            user: set(items)
            for user, items in self.train.groupby('user_id')['item_id']}

    @cached_property
    def items(self) -> list:
        return sorted(
            set(self.train['item_id']) | set(self.test['item_id']),
            key=id_sort_key)

    @cached_property
    def users(self) -> list:
        return sorted(set(self.train['user_id']), key=id_sort_key)

    @property
    def test_users(self) -> list:
        return sorted(self.per_user_test_item, key=id_sort_key)

    def history(self, user_id) -> pd.DataFrame:
        return self.train[self.train['user_id'] == user_id]

    def write(self, folder: str):
        os.makedirs(folder, exist_ok=True)
        write_interactions(self.train, os.path.join(folder, 'train.tsv'))
        write_interactions(self.test, os.path.join(folder, 'test.tsv'))

    @classmethod
    def read(cls, folder: str) -> 'DatasetSplit':
        train = read_interactions(os.path.join(folder, 'train.tsv'))
        test = read_interactions(os.path.join(folder, 'test.tsv'))
        return cls(train, test, dict(zip(test['user_id'], test['item_id'])))


def temporal_split(interactions: pd.DataFrame) -> DatasetSplit:
    """
    Per-user leave-last-out: the latest interaction of every user with at
    least two interactions is held out for test.
    """
    if interactions['timestamp'].isna().any():
        raise TimestampError('temporal split needs timestamped interactions')
    ordered = interactions.sort_values(
        ['user_id', 'timestamp', 'item_id'], kind='mergesort')
    counts = ordered.groupby('user_id')['item_id'].transform('size')
    is_last = ~ordered.duplicated('user_id', keep='last')
    test_mask = is_last & (counts >= 2)
    single = int((counts == 1).sum())
    if single:
        logger.info('%s single-interaction users kept train-only', single)
    train = ordered[~test_mask].reset_index(drop=True)
    test = ordered[test_mask].reset_index(drop=True)
    if test.empty and not interactions.empty:
        logger.warning('temporal split produced an empty test set')
    return DatasetSplit(
        train, test, dict(zip(test['user_id'], test['item_id'])))


def label_preferences(interactions: pd.DataFrame,
                      scale: RatingScale) -> pd.Series:
    ratings = interactions['rating']
    outside = ~ratings.between(scale.low, scale.high)
    if outside.any():
        raise DatasetError(
            f'{int(outside.sum())} ratings outside '
            f'{scale.low:g}-{scale.high:g}')
    labels = pd.Series(NEUTRAL, index=interactions.index, dtype=object)
    labels[ratings >= scale.like] = LIKED
    labels[ratings <= scale.dislike] = DISLIKED
    return labels


def compute_stats(interactions: pd.DataFrame,
                  n_items: int | None = None) -> DatasetStats:
    n_users = int(interactions['user_id'].nunique())
    if n_items is None:
        n_items = int(interactions['item_id'].nunique())
    n_interactions = len(interactions)
    density = n_interactions / (n_users * n_items) if n_interactions else 0.0
    return DatasetStats(n_users, n_items, n_interactions, density)


def item_universe(dataset_format: DatasetFormat,
                  interactions: pd.DataFrame) -> int | None:
    if not dataset_format.full_item_universe or interactions.empty:
        return None
    return int(pd.to_numeric(interactions['item_id']).max())


def write_interactions(interactions: pd.DataFrame, path: str):
    interactions[COLUMNS].to_csv(path, sep='\t', index=False)


def read_interactions(path: str) -> pd.DataFrame:
    frame = pd.read_csv(
        path, sep='\t', dtype={'user_id': str, 'item_id': str},
        keep_default_na=False, na_values={'timestamp': ['']})
    return _typed(frame)


def write_stats(stats: DatasetStats, path: str):
    write_json(path, stats.as_dict())


def read_stats(path: str) -> DatasetStats:
    return DatasetStats(**read_json(path))


class PreparedDataset(NamedTuple):
    folder: str
    stats: DatasetStats
    split: DatasetSplit
    catalog: Catalog


def prepare_dataset(tag: str, raw: str, out: str, k_core: int | None = None,
                    seed: int = 0, malformed_threshold: int = 0,
                    force_timestamps: bool = False) -> PreparedDataset:
    """
    load -> simulate timestamps (when the source has none) -> k-core ->
    leave-last-out split, written to ``out``.
    """
    dataset_format = get_format(tag)
    interactions, catalog = load_raw(raw, tag, malformed_threshold)
    if not dataset_format.has_timestamps or force_timestamps:
        interactions = simulate_timestamps(
            interactions, seed, force=force_timestamps)
    if k_core is None:
        k_core = dataset_format.default_k_core
    interactions = k_core_filter(interactions, k_core)
    split = temporal_split(interactions)
    stats = compute_stats(
        interactions, item_universe(dataset_format, interactions))
    catalog = catalog.restrict(interactions['item_id'].unique())

    os.makedirs(out, exist_ok=True)
    write_interactions(interactions, os.path.join(out, 'interactions.tsv'))
    catalog.write(os.path.join(out, 'items.tsv'))
    split.write(out)
    write_stats(stats, os.path.join(out, 'stats.json'))
    logger.info(
        'prepared %s: %s users, %s items, %s interactions, density %.6f',
        tag, *stats)
    return PreparedDataset(out, stats, split, catalog)


def load_prepared(folder: str) -> PreparedDataset:
    return PreparedDataset(
        folder,
        read_stats(os.path.join(folder, 'stats.json')),
        DatasetSplit.read(folder),
        Catalog.read(os.path.join(folder, 'items.tsv')))
