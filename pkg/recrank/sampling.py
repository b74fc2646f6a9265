"""
Training-user selection: importance-aware draws, cluster-proportional
draws (K-means or DBSCAN), uniform draws and the repetition penalty
resample that merges them.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from django.utils.functional import cached_property
from sklearn.cluster import DBSCAN, KMeans

from recrank.exceptions import SamplingError
from recrank.utils import derive_rng, id_sort_key

logger = logging.getLogger(__name__)

STRATEGIES = ('importance', 'kmeans', 'dbscan', 'random', 'composite')
CLUSTERINGS = ('kmeans', 'dbscan')
NOISE = -1


@dataclass
class UserEmbeddingTable:
    user_ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.user_ids = [str(u) for u in self.user_ids]
        self.vectors = np.asarray(self.vectors, dtype=float)
        if self.vectors.ndim != 2 or len(self.user_ids) != len(self.vectors):
            raise SamplingError('embedding table shape mismatch')
        if not np.isfinite(self.vectors).all():
            raise SamplingError('embedding table has non-finite entries')

    def __len__(self):
        return len(self.user_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def normalized(self) -> 'UserEmbeddingTable':
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return UserEmbeddingTable(self.user_ids, self.vectors / norms)

    def write(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            for user, vector in zip(self.user_ids, self.vectors):
                f.write(user + '\t' + ','.join(repr(float(v)) for v in vector))
                f.write('\n')

    @classmethod
    def read(cls, path: str) -> 'UserEmbeddingTable':
        frame = pd.read_csv(
            path, sep='\t', header=None, names=['user_id', 'vector'],
            dtype=str)
        vectors = np.array([
            [float(v) for v in row.split(',')] for row in frame['vector']])
        return cls(list(frame['user_id']), vectors.reshape(len(frame), -1))


@dataclass
class SamplingPlan:
    strategy: str = 'composite'
    n_samples: int = 100
    penalty_c: float = 0.9
    k: int = 10
    eps: float = 0.5
    min_pts: int = 5
    clustering: str = 'kmeans'
    seed: int = 0
    embeddings: str | None = 'model'

    def errors(self) -> list[tuple[str, str]]:
        result = []
        if self.strategy not in STRATEGIES:
            result.append(('strategy', f'unknown strategy {self.strategy!r}'))
        if self.clustering not in CLUSTERINGS:
            result.append(
                ('clustering', f'unknown clustering {self.clustering!r}'))
        if not 0 < self.penalty_c < 1:
            result.append(('penalty_c', 'must lie in (0, 1)'))
        if self.n_samples < 1:
            result.append(('n_samples', 'must be >= 1'))
        if self.k < 1:
            result.append(('k', 'must be >= 1'))
        if not self.eps > 0:
            result.append(('eps', 'must be > 0'))
        if self.min_pts < 1:
            result.append(('min_pts', 'must be >= 1'))
        if self.uses_clustering and not self.embeddings:
            result.append((
                'embeddings', f'required for strategy {self.strategy}'))
        return result

    @property
    def uses_clustering(self) -> bool:
        return self.strategy in ('kmeans', 'dbscan', 'composite')


@dataclass
class SampledUserSet:
    draws: list = field(default_factory=list)

    def __len__(self):
        return len(self.draws)

    @cached_property
    def multiplicity(self) -> Counter:
        return Counter(self.draws)

    @property
    def users(self) -> list:
        """ Distinct users in order of first draw """
        return list(dict.fromkeys(self.draws))

    def merged(self, other: 'SampledUserSet') -> 'SampledUserSet':
        return SampledUserSet(self.draws + other.draws)

    def write(self, path: str):
        pd.DataFrame({
            'draw_index': range(len(self.draws)), 'user_id': self.draws,
        }).to_csv(path, sep='\t', index=False)

    @classmethod
    def read(cls, path: str) -> 'SampledUserSet':
        frame = pd.read_csv(path, sep='\t', dtype={'user_id': str})
        return cls(list(frame.sort_values('draw_index')['user_id']))


def _normalize(weights: Mapping) -> dict:
    users = list(weights)
    values = np.array([weights[u] for u in users], dtype=float)
    return dict(zip(users, values / values.sum()))


def _draw(probabilities: Mapping, n: int, rng) -> SampledUserSet:
    users = sorted(probabilities, key=id_sort_key)
    if n == 0:
        return SampledUserSet([])
    p = np.array([probabilities[u] for u in users], dtype=float)
    picks = rng.choice(len(users), size=n, replace=True, p=p / p.sum())
    return SampledUserSet([users[i] for i in picks])


def importance_probabilities(counts: Mapping) -> dict:
    """
    p(u) = ln(q_u) / sum ln(q_v). When any user has a single interaction
    ln(1 + q) is used for everyone so no user gets zero mass.
    """
    smooth = any(q == 1 for q in counts.values())
    weights = {}
    for user, q in counts.items():
        weight = math.log1p(q) if smooth else (math.log(q) if q > 0 else 0.0)
        if weight <= 0:
            logger.info('user %s excluded from importance sampling', user)
            continue
        weights[user] = weight
    if not weights:
        raise SamplingError('no user has positive importance')
    return _normalize(weights)


def importance_sample(counts: Mapping, n: int, seed: int) -> SampledUserSet:
    return _draw(
        importance_probabilities(counts), n, derive_rng(seed, 'importance'))


def _matrix(emb: UserEmbeddingTable):
    return emb.user_ids, emb.vectors


def kmeans_cluster(emb: UserEmbeddingTable, k: int, seed: int,
                   n_init: int = 10) -> dict:
    """ Lloyd iterations from k-means++ seeds, best of ``n_init`` runs """
    users, matrix = _matrix(emb)
    if k > len(users):
        raise SamplingError(f'K={k} exceeds the {len(users)} users')
    model = KMeans(
        n_clusters=k, init='k-means++', n_init=n_init, max_iter=300,
        algorithm='lloyd', random_state=seed)
    labels = model.fit_predict(matrix)
    logger.debug('k-means K=%s inertia %.6f', k, model.inertia_)
    return dict(zip(users, (int(x) for x in labels)))


def dbscan_cluster(emb: UserEmbeddingTable, eps: float, min_pts: int) -> dict:
    users, matrix = _matrix(emb)
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(matrix)
    noise = int((labels == NOISE).sum())
    logger.debug('dbscan eps=%s min_pts=%s: %s noise users',
                 eps, min_pts, noise)
    return dict(zip(users, (int(x) for x in labels)))


def cluster_probabilities(labels: Mapping) -> dict:
    sizes = Counter(label for label in labels.values() if label != NOISE)
    if not sizes:
        raise SamplingError('every user is labelled as noise')
    return _normalize({
        user: float(sizes[label]) for user, label in labels.items()
        if label != NOISE})


def cluster_proportional_sample(labels: Mapping, n: int,
                                seed: int) -> SampledUserSet:
    """ p(u) proportional to the size of u's cluster; noise gets nothing """
    return _draw(cluster_probabilities(labels), n, derive_rng(seed, 'cluster'))


def random_sample(users: Sequence, n: int, seed: int) -> SampledUserSet:
    users = list(users)
    if not users:
        raise SamplingError('cannot sample from an empty user set')
    uniform = {u: 1.0 for u in users}
    return _draw(_normalize(uniform), n, derive_rng(seed, 'random'))


def penalty_weights(multiplicity: Mapping, c: float) -> dict:
    return {user: c ** m for user, m in multiplicity.items()}


def penalty_probabilities(merged: SampledUserSet, c: float) -> dict:
    """ mass(u) = C**M(u) * M(u) / |U3| """
    if not merged.draws:
        raise SamplingError('nothing to resample: merged set is empty')
    total = len(merged)
    psi = penalty_weights(merged.multiplicity, c)
    return _normalize({
        user: psi[user] * m / total
        for user, m in merged.multiplicity.items()})


def penalty_resample(merged: SampledUserSet,
                     plan: SamplingPlan) -> SampledUserSet:
    return _draw(
        penalty_probabilities(merged, plan.penalty_c), plan.n_samples,
        derive_rng(plan.seed, 'penalty'))


def _cluster_labels(plan: SamplingPlan, emb: UserEmbeddingTable | None,
                    clustering: str) -> dict:
    if emb is None:
        raise SamplingError(f'{clustering} sampling needs user embeddings')
    emb = emb.normalized()
    if clustering == 'kmeans':
        return kmeans_cluster(emb, plan.k, plan.seed)
    return dbscan_cluster(emb, plan.eps, plan.min_pts)


def sample_users(plan: SamplingPlan, counts: Mapping,
                 emb: UserEmbeddingTable | None = None) -> SampledUserSet:
    """
    Run one strategy. ``composite`` draws half the users by importance,
    half by the configured clustering, then applies the penalty resample.
    """
    strategy = plan.strategy
    if strategy == 'random':
        return random_sample(
            sorted(counts, key=id_sort_key), plan.n_samples, plan.seed)
    if strategy == 'importance':
        return importance_sample(counts, plan.n_samples, plan.seed)
    if strategy in CLUSTERINGS:
        labels = _cluster_labels(plan, emb, strategy)
        return cluster_proportional_sample(labels, plan.n_samples, plan.seed)
    if strategy != 'composite':
        raise SamplingError(f'unknown strategy {strategy!r}')
    n_importance = plan.n_samples - plan.n_samples // 2
    first = importance_sample(counts, n_importance, plan.seed)
    labels = _cluster_labels(plan, emb, plan.clustering)
    second = cluster_proportional_sample(
        labels, plan.n_samples - n_importance, plan.seed)
    merged = first.merged(second)
    result = penalty_resample(merged, plan)
    logger.info(
        'sampled %s draws over %s users (max multiplicity %s)',
        len(result), len(result.multiplicity),
        max(result.multiplicity.values(), default=0))
    return result
