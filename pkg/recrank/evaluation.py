"""
HR@k / NDCG@k over final rankings, paired t-tests of every variant
against the base order and Holm-Bonferroni correction over that family.
"""
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats
from statsmodels.iolib.table import SimpleTable
from statsmodels.stats.multitest import multipletests

from recrank.exceptions import EvaluationError
from recrank.hybrid import BASE, FinalRanking
from recrank.recommenders import EmbeddingModel, top_k_unseen
from recrank.utils import (
    atomic_write_text, id_sort_key, read_json, write_json)

logger = logging.getLogger(__name__)

DEFAULT_KS = (3, 5)
# base order over the whole unseen catalog instead of the candidate list
FULL_CATALOG = 'base_full_catalog'


def _rank_of(ranking: Sequence, truth) -> int | None:
    try:
        return list(ranking).index(truth) + 1
    except ValueError:
        return None


def hit_ratio_at_k(ranking: Sequence, truth, k: int) -> int:
    if k < 1:
        raise EvaluationError(f'k must be >= 1, got {k}')
    rank = _rank_of(ranking, truth)
    return int(rank is not None and rank <= k)


def ndcg_at_k(ranking: Sequence, truth, k: int) -> float:
    """ One relevant item, so the ideal DCG is 1 """
    if k < 1:
        raise EvaluationError(f'k must be >= 1, got {k}')
    rank = _rank_of(ranking, truth)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def metric_names(ks: Iterable[int]) -> list[str]:
    return [name for k in ks for name in (f'H@{k}', f'N@{k}')]


def user_metrics(ranking: Sequence, truth, ks: Iterable[int]) -> dict:
    result = {}
    for k in ks:
        result[f'H@{k}'] = float(hit_ratio_at_k(ranking, truth, k))
        result[f'N@{k}'] = ndcg_at_k(ranking, truth, k)
    return result


class TTestResult:
    def __init__(self, t: float, p: float, degenerate: bool = False):
        self.t = t
        self.p = p
        self.degenerate = degenerate

    def __repr__(self):
        flag = ', degenerate' if self.degenerate else ''
        return f'TTestResult(t={self.t:.4f}, p={self.p:.4g}{flag})'


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """
    Two-sided paired t-test. When the differences have no variance the
    test is degenerate: p is 1.0 for equal means and 0.0 otherwise.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) != len(b):
        raise EvaluationError(f'paired samples differ: {len(a)} vs {len(b)}')
    if len(a) < 2:
        raise EvaluationError('paired t-test needs at least two pairs')
    diff = a - b
    if np.all(diff == diff[0]):
        if diff[0] == 0:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, diff[0]), 0.0, True)
    result = stats.ttest_rel(a, b)
    return TTestResult(float(result.statistic), float(result.pvalue))


@dataclass
class SignificanceResult:
    method: str
    baseline: str
    metric: str
    t: float | None
    p: float
    significant: bool
    degenerate: bool = False
    p_corrected: float | None = None

    def as_dict(self) -> dict:
        """ JSON has no infinity; a degenerate t is written as null """
        result = asdict(self)
        if self.t is not None and not math.isfinite(self.t):
            result['t'] = None
        return result


def holm_bonferroni(raw: Sequence[tuple], alpha: float = 0.05) -> list:
    """
    ``raw`` is a list of (comparison, p). Returns (comparison, rejected,
    corrected p) in input order using the step-down Holm procedure.
    """
    if not 0 < alpha < 1:
        raise EvaluationError(f'alpha must lie in (0, 1), got {alpha}')
    if not raw:
        return []
    pvalues = np.array([p for _, p in raw], float)
    reject, corrected, _, _ = multipletests(
        pvalues, alpha=alpha, method='holm')
    return [
        (comparison, bool(r), float(c))
        for (comparison, _), r, c in zip(raw, reject, corrected)]


@dataclass
class EvalReport:
    method: str
    metrics: dict
    users: list
    per_user: dict
    parse_failure_rate: float = 0.0
    fallback_rate: float = 0.0
    retrieval_miss_rate: float = 0.0
    config_hash: str = ''
    seed: int = 0
    stars: dict = field(default_factory=dict)
    markers: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_method(method: str, finals: Iterable[FinalRanking],
                    truth: Mapping, ks: Iterable[int],
                    users: Sequence) -> EvalReport:
    ks = list(ks)
    by_user = {f.user_id: f.items for f in finals}
    per_user = {name: [] for name in metric_names(ks)}
    misses = 0
    for user in users:
        ranking = by_user[user]
        if truth[user] not in ranking:
            misses += 1
        for name, value in user_metrics(ranking, truth[user], ks).items():
            per_user[name].append(value)
    metrics = {
        name: math.fsum(values) / len(values) if values else 0.0
        for name, values in per_user.items()}
    return EvalReport(
        method, metrics, list(users), per_user,
        retrieval_miss_rate=misses / len(users) if users else 0.0)


def evaluated_users(rankings: Mapping[str, list], truth: Mapping,
                    drop: Iterable = ()) -> list:
    """
    Users every method ranked, minus users without a held-out item and
    dropped users. Methods covering different users are an error.
    """
    drop = set(drop)
    user_sets = {
        method: {f.user_id for f in finals} - drop
        for method, finals in rankings.items()}
    reference = next(iter(user_sets.values()), set())
    for method, users in user_sets.items():
        if users != reference:
            raise EvaluationError(
                f'{method} covers {len(users)} users, others '
                f'{len(reference)}: methods must share one user set')
    without_truth = {u for u in reference if truth.get(u) is None}
    if without_truth:
        logger.info('%s users have no held-out item and are not evaluated',
                    len(without_truth))
    return sorted(reference - without_truth, key=id_sort_key)


def _markers(reports: list, names: list) -> dict:
    markers = {r.method: {} for r in reports}
    for name in names:
        values = sorted({round(r.metrics[name], 12) for r in reports},
                        reverse=True)
        for report in reports:
            value = round(report.metrics[name], 12)
            if value == values[0]:
                markers[report.method][name] = 'best'
            elif len(values) > 1 and value == values[1]:
                markers[report.method][name] = 'second'
    return markers


def render_table(reports: list, names: list, title: str = '') -> str:
    rows = []
    for report in reports:
        row = []
        for name in names:
            cell = f'{report.metrics[name]:.4f}'
            if report.stars.get(name):
                cell += '*'
            marker = report.markers.get(name)
            if marker == 'best':
                cell = f'**{cell}**'
            elif marker == 'second':
                cell = f'_{cell}_'
            row.append(cell)
        rows.append(row)
    table = SimpleTable(
        rows, headers=names, stubs=[r.method for r in reports], title=title)
    return table.as_text()


@dataclass
class ReportSet:
    reports: list
    significance: list
    table: str
    users: list

    def as_dict(self) -> dict:
        return {
            'users': self.users,
            'reports': [r.as_dict() for r in self.reports],
            'significance': [s.as_dict() for s in self.significance],
        }

    def write(self, folder: str):
        write_json(os.path.join(folder, 'report.json'), self.as_dict())
        atomic_write_text(
            os.path.join(folder, 'report.txt'), self.table + '\n')

    @classmethod
    def read(cls, folder: str) -> 'ReportSet':
        data = read_json(os.path.join(folder, 'report.json'))
        with open(os.path.join(folder, 'report.txt'), encoding='utf-8') as f:
            table = f.read().rstrip('\n')
        return cls(
            [EvalReport(**r) for r in data['reports']],
            [SignificanceResult(**s) for s in data['significance']],
            table, data['users'])

    def report(self, method: str) -> EvalReport:
        for report in self.reports:
            if report.method == method:
                return report
        raise KeyError(method)


def aggregate_report(rankings: Mapping[str, list], truth: Mapping,
                     ks: Iterable[int] = DEFAULT_KS, alpha: float = 0.05,
                     parse_stats: Mapping | None = None,
                     drop_users: Iterable = (), config_hash: str = '',
                     seed: int = 0, baseline: str = BASE,
                     title: str = '',
                     outside_family: Iterable[str] = (FULL_CATALOG,)
                     ) -> ReportSet:
    """
    ``rankings`` maps method -> FinalRanking list and ``parse_stats``
    maps method -> (parse failure rate, fallback rate). Every non-base
    method is compared against ``baseline`` on every metric. The Holm
    family is the set of those comparisons, minus the methods named in
    ``outside_family``; these are tested alone at ``alpha`` and carry
    no corrected p.
    """
    ks = list(ks)
    names = metric_names(ks)
    users = evaluated_users(rankings, truth, drop_users)
    if not users:
        raise EvaluationError('no users left to evaluate')
    parse_stats = parse_stats or {}
    reports = []
    for method, finals in rankings.items():
        report = evaluate_method(method, finals, truth, ks, users)
        report.parse_failure_rate, report.fallback_rate = parse_stats.get(
            method, (0.0, 0.0))
        report.config_hash, report.seed = config_hash, seed
        reports.append(report)

    significance = []
    by_method = {r.method: r for r in reports}
    if baseline in by_method and len(users) >= 2:
        base = by_method[baseline]
        outside_family = set(outside_family)
        family, alone = [], []
        for report in reports:
            if report.method == baseline:
                continue
            for name in names:
                test = paired_t_test(
                    report.per_user[name], base.per_user[name])
                group = alone if report.method in outside_family else family
                group.append(((report.method, name), test))
        decisions = holm_bonferroni(
            [(key, test.p) for key, test in family], alpha)
        decisions += [(key, test.p < alpha, None) for key, test in alone]
        for ((method, name), rejected, corrected), (_, test) in zip(
                decisions, family + alone):
            significance.append(SignificanceResult(
                method, baseline, name, test.t, test.p, rejected,
                test.degenerate, corrected))
            improved = by_method[method].metrics[name] > base.metrics[name]
            by_method[method].stars[name] = rejected and improved

    for method, markers in _markers(reports, names).items():
        by_method[method].markers = markers
    return ReportSet(
        reports, significance, render_table(reports, names, title), users)


def full_catalog_rankings(model: EmbeddingModel, split, users: Iterable,
                          k: int) -> list:
    """ Base order over every unseen item instead of the candidate list """
    return [
        FinalRanking(str(u), BASE, top_k_unseen(
            model, u, k, split.seen.get(str(u), ())))
        for u in users]
