import math
from collections import Counter, deque

import numpy as np
import pytest
from scipy import stats

from recrank import sampling
from recrank.exceptions import SamplingError

N_DRAWS = 100_000


def _goodness_of_fit(sampled, probabilities):
    users = sorted(probabilities)
    counts = Counter(sampled.draws)
    observed = [counts[u] for u in users]
    expected = [probabilities[u] * len(sampled) for u in users]
    return stats.chisquare(observed, expected).pvalue


def test_importance_probabilities():
    p = sampling.importance_probabilities({'u1': 10, 'u2': 100})
    assert p['u1'] == pytest.approx(1 / 3, abs=1e-12)
    assert p['u2'] == pytest.approx(2 / 3, abs=1e-12)


def test_importance_probabilities_degenerate():
    assert sampling.importance_probabilities({'a': 4, 'b': 4, 'c': 4}) == \
        pytest.approx({'a': 1 / 3, 'b': 1 / 3, 'c': 1 / 3})
    assert sampling.importance_probabilities({'a': 7}) == {'a': 1.0}


def test_importance_smooths_single_interactions():
    p = sampling.importance_probabilities({'a': 1, 'b': math.e - 1})
    assert p['a'] == pytest.approx(
        math.log(2) / (math.log(2) + 1), abs=1e-12)


def test_importance_draws_fit():
    counts = {'u1': 2, 'u2': 5, 'u3': 10, 'u4': 100}
    sampled = sampling.importance_sample(counts, N_DRAWS, seed=3)
    p = sampling.importance_probabilities(counts)
    assert _goodness_of_fit(sampled, p) > 0.01


def test_cluster_proportional_draws_fit():
    labels = {f'u{n}': 0 if n < 8 else 1 for n in range(10)}
    sampled = sampling.cluster_proportional_sample(labels, N_DRAWS, seed=3)
    expected = {
        u: (8 if label == 0 else 2) / 68 for u, label in labels.items()}
    assert sampling.cluster_probabilities(labels) == pytest.approx(expected)
    assert _goodness_of_fit(sampled, expected) > 0.01


def test_cluster_sample_ignores_noise():
    labels = {'a': sampling.NOISE, 'b': sampling.NOISE, 'c': 4}
    sampled = sampling.cluster_proportional_sample(labels, 50, seed=0)
    assert sampled.draws == ['c'] * 50


def test_all_noise_is_an_error():
    with pytest.raises(SamplingError):
        sampling.cluster_probabilities({'a': sampling.NOISE})


def test_random_draws_fit():
    users = [str(n) for n in range(10)]
    sampled = sampling.random_sample(users, N_DRAWS, seed=3)
    assert _goodness_of_fit(sampled, {u: 0.1 for u in users}) > 0.01


def test_random_sample_edges():
    assert not sampling.random_sample(['a', 'b'], 0, seed=0)
    assert sampling.random_sample(['a'], 4, seed=0).draws == ['a'] * 4
    with pytest.raises(SamplingError):
        sampling.random_sample([], 3, seed=0)


def test_penalty_weights():
    assert sampling.penalty_weights({'u': 2}, 0.9)['u'] == pytest.approx(0.81)
    weights = sampling.penalty_weights({'a': 1, 'b': 3}, 0.5)
    assert weights['a'] / weights['b'] == pytest.approx(4.0)


def test_penalty_resample_fits():
    merged = sampling.SampledUserSet(['a', 'b', 'b', 'c', 'c', 'c', 'd'])
    plan = sampling.SamplingPlan(n_samples=N_DRAWS, penalty_c=0.5, seed=3)
    # C**M * M over the merged multiplicities a=1, b=2, c=3, d=1
    mass = {'a': 0.5, 'b': 0.25 * 2, 'c': 0.125 * 3, 'd': 0.5}
    total = sum(mass.values())
    expected = {u: m / total for u, m in mass.items()}

    sampled = sampling.penalty_resample(merged, plan)

    assert sampling.penalty_probabilities(merged, 0.5) == \
        pytest.approx(expected)
    assert _goodness_of_fit(sampled, expected) > 0.01


def test_penalty_limit_matches_merge():
    merged = sampling.SampledUserSet(['a', 'b', 'b', 'c'])
    p = sampling.penalty_probabilities(merged, 1 - 1e-12)
    assert p == pytest.approx({'a': 0.25, 'b': 0.5, 'c': 0.25})


def _mean_max_copies(merged, penalty_c, trials=30):
    peaks = []
    for seed in range(trials):
        plan = sampling.SamplingPlan(n_samples=30, penalty_c=penalty_c,
                                     seed=seed)
        sampled = sampling.penalty_resample(merged, plan)
        peaks.append(max(sampled.multiplicity.values()))
    return float(np.mean(peaks))


def test_smaller_penalty_spreads_draws():
    # one user drawn nine times next to nine drawn once
    merged = sampling.SampledUserSet(
        ['hot'] * 9 + [f'u{n}' for n in range(9)])

    strict = _mean_max_copies(merged, 0.1)
    loose = _mean_max_copies(merged, 0.9)

    assert sampling.penalty_probabilities(merged, 0.1)['hot'] < 1e-6
    assert sampling.penalty_probabilities(merged, 0.9)['hot'] > 0.25
    assert strict < loose


def _table(points, prefix='u'):
    return sampling.UserEmbeddingTable(
        [f'{prefix}{n}' for n in range(len(points))], np.array(points))


def test_kmeans_separates_clouds():
    rng = np.random.default_rng(0)
    points = np.vstack([
        rng.normal(0, 0.05, (10, 2)), rng.normal(5, 0.05, (10, 2))])
    labels = sampling.kmeans_cluster(_table(points), 2, seed=1)
    first = {labels[f'u{n}'] for n in range(10)}
    second = {labels[f'u{n}'] for n in range(10, 20)}
    assert len(first) == len(second) == 1
    assert first != second


def _inertia(points, labels):
    points = np.asarray(points)
    total = 0.0
    for label in set(labels):
        members = points[[n for n, x in enumerate(labels) if x == label]]
        total += ((members - members.mean(axis=0)) ** 2).sum()
    return total


def test_kmeans_reaches_optimal_inertia():
    points = [
        (cx + dx, cy + dy)
        for cx, cy in ((0, 0), (5, 0), (0, 5))
        for dx, dy in ((0.1, 0.1), (0.1, -0.1), (-0.1, 0.1), (-0.1, -0.1))]
    labels = sampling.kmeans_cluster(_table(points), 3, seed=0)
    ordered = [labels[f'u{n}'] for n in range(12)]
    assert _inertia(points, ordered) == pytest.approx(0.24, abs=1e-9)


def test_kmeans_one_cluster_per_user():
    points = [(0, 0), (1, 0), (0, 1), (3, 3)]
    labels = sampling.kmeans_cluster(_table(points), 4, seed=0)
    assert len(set(labels.values())) == 4


def test_kmeans_rejects_large_k():
    with pytest.raises(SamplingError):
        sampling.kmeans_cluster(_table([(0, 0), (1, 1)]), 3, seed=0)


def _reference_dbscan(points, eps, min_pts):
    """ Pairwise distances plus breadth-first expansion from core points """
    points = np.asarray(points, float)
    distance = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    neighbours = [np.flatnonzero(row <= eps).tolist() for row in distance]
    core = [len(n) >= min_pts for n in neighbours]
    labels = [sampling.NOISE] * len(points)
    cluster = 0
    for start in range(len(points)):
        if not core[start] or labels[start] != sampling.NOISE:
            continue
        labels[start] = cluster
        queue = deque([start])
        while queue:
            point = queue.popleft()
            if not core[point]:
                continue
            for other in neighbours[point]:
                if labels[other] == sampling.NOISE:
                    labels[other] = cluster
                    queue.append(other)
        cluster += 1
    return labels


def _partition(labels):
    groups = {}
    for n, label in enumerate(labels):
        groups.setdefault(label, set()).add(n)
    noise = groups.pop(sampling.NOISE, set())
    return noise, sorted(sorted(g) for g in groups.values())


def test_dbscan_blobs_and_outliers():
    rng = np.random.default_rng(4)
    points = np.vstack([
        rng.normal(0, 0.1, (8, 2)), rng.normal(4, 0.1, (9, 2)),
        [(10, 10), (-10, 10), (10, -10)]])
    labels = sampling.dbscan_cluster(_table(points), eps=0.6, min_pts=3)
    ordered = [labels[f'u{n}'] for n in range(len(points))]

    noise, clusters = _partition(ordered)
    assert noise == {17, 18, 19}
    assert len(clusters) == 2
    assert (noise, clusters) == _partition(
        _reference_dbscan(points, 0.6, 3))


def test_dbscan_huge_eps_single_cluster():
    points = [(0, 0), (1, 5), (9, 2), (4, 4)]
    labels = sampling.dbscan_cluster(_table(points), eps=1e6, min_pts=2)
    assert set(labels.values()) == {0}


def test_dbscan_noise_never_drawn():
    rng = np.random.default_rng(2)
    points = np.vstack([rng.normal(0, 0.1, (10, 2)), [(20, 20), (-20, 0)]])
    labels = sampling.dbscan_cluster(_table(points), eps=0.6, min_pts=3)
    noise = {u for u, label in labels.items() if label == sampling.NOISE}
    assert noise == {'u10', 'u11'}

    sampled = sampling.cluster_proportional_sample(labels, N_DRAWS, seed=9)

    assert not noise & set(sampled.draws)


def test_composite_sample():
    rng = np.random.default_rng(1)
    users = [str(n) for n in range(30)]
    emb = sampling.UserEmbeddingTable(users, rng.normal(size=(30, 4)))
    counts = {u: int(rng.integers(2, 50)) for u in users}
    plan = sampling.SamplingPlan(n_samples=25, k=3, seed=11)

    first = sampling.sample_users(plan, counts, emb)
    second = sampling.sample_users(plan, counts, emb)

    assert len(first) == 25
    assert first.draws == second.draws
    assert set(first.draws) <= set(users)


def test_clustering_needs_embeddings():
    plan = sampling.SamplingPlan(strategy='kmeans', embeddings=None)
    assert ('embeddings', 'required for strategy kmeans') in plan.errors()
    with pytest.raises(SamplingError):
        sampling.sample_users(plan, {'a': 3})


def test_plan_errors():
    plan = sampling.SamplingPlan(penalty_c=1.0, strategy='greedy', k=0)
    keys = [key for key, _ in plan.errors()]
    assert keys == ['strategy', 'penalty_c', 'k']


def test_sampled_set_file(tmp_path):
    path = str(tmp_path / 'draws.tsv')
    sampled = sampling.SampledUserSet(['10', '2', '10'])
    sampled.write(path)
    loaded = sampling.SampledUserSet.read(path)
    assert loaded.draws == ['10', '2', '10']
    assert loaded.multiplicity == {'10': 2, '2': 1}
    assert loaded.users == ['10', '2']


def test_embedding_table_normalized():
    table = sampling.UserEmbeddingTable(['a', 'b'], [[3.0, 4.0], [0.0, 0.0]])
    normalized = table.normalized()
    assert normalized.vectors.tolist() == [[0.6, 0.8], [0.0, 0.0]]
