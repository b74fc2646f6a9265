"""
Utility scores per candidate and their weighted combination.

    u_point  = P - m * C1
    u_pair   = C2, or C2 * wins in win-count mode
    u_list   = -m' * C3
    u_hybrid = a1 * u_point + a2 * u_pair + a3 * u_list

m is the initial model's rank, m' the listwise rank, P the predicted
relevance score.
"""
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

from recrank.exceptions import RecRankError
from recrank.parser import YES, ParsedResult
from recrank.prompts import LISTWISE, PAIRWISE, POINTWISE, POINTWISE_FIX
from recrank.ranklist import RankingList
from recrank.utils import id_sort_key, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

CONSTANT = 'constant'
WIN_COUNT = 'win_count'
PAIRWISE_MODES = (CONSTANT, WIN_COUNT)

BASE = 'base'
HYBRID = 'hybrid'
HYBRID_FIX = 'hybrid_fix'
VARIANTS = (
    BASE, POINTWISE, POINTWISE_FIX, PAIRWISE, LISTWISE, HYBRID, HYBRID_FIX)


@dataclass(frozen=True)
class UtilityWeights:
    alpha: tuple = (1 / 3, 1 / 3, 1 / 3)
    c1: float = 0.1
    c2: float = 0.1
    c3: float = 0.1
    pairwise_mode: str = CONSTANT

    @classmethod
    def from_dict(cls, section: Mapping) -> 'UtilityWeights':
        values = {k: section[k] for k in (
            'c1', 'c2', 'c3', 'pairwise_mode') if k in section}
        if 'alpha' in section:
            values['alpha'] = tuple(float(a) for a in section['alpha'])
        return cls(**values)

    def errors(self) -> list[tuple[str, str]]:
        result = []
        if len(self.alpha) != 3:
            result.append(('alpha', 'needs exactly three weights'))
        elif any(a < 0 for a in self.alpha):
            result.append(('alpha', 'weights must be >= 0'))
        elif abs(math.fsum(self.alpha) - 1) > 1e-12:
            result.append(('alpha', f'sums to {math.fsum(self.alpha)!r}, '
                                    f'not 1'))
        for name in ('c1', 'c2', 'c3'):
            if not getattr(self, name) > 0:
                result.append((name, 'must be > 0'))
        if self.pairwise_mode not in PAIRWISE_MODES:
            result.append((
                'pairwise_mode', f'unknown mode {self.pairwise_mode!r}'))
        return result

    def one_hot(self, index: int) -> 'UtilityWeights':
        alpha = [0.0, 0.0, 0.0]
        alpha[index] = 1.0
        return replace(self, alpha=tuple(alpha))

    def as_dict(self) -> dict:
        return asdict(self) | {'alpha': list(self.alpha)}


def utility_pointwise(p: float, m: int, c1: float) -> float:
    return p - m * c1


def utility_pairwise(items: Iterable, verdicts: Iterable[tuple], c2: float,
                     mode: str = CONSTANT) -> dict:
    """
    ``verdicts`` holds (item_a, item_b, prefers_a) triples. Constant mode
    gives every item C2; win-count mode gives C2 per comparison won.
    """
    items = list(items)
    if mode == CONSTANT:
        return {item: c2 for item in items}
    if mode != WIN_COUNT:
        raise RecRankError(f'unknown pairwise mode {mode!r}')
    wins = Counter(a if prefers_a else b for a, b, prefers_a in verdicts)
    return {item: c2 * wins[item] for item in items}


def utility_listwise(m_prime: int, c3: float) -> float:
    return -m_prime * c3


@dataclass
class ItemUtility:
    item_id: str
    m: int
    m_prime: int
    p: float
    u_point: float
    u_pair: float
    u_list: float
    u_hybrid: float = 0.0


@dataclass
class UtilityScores:
    user_id: str
    rows: list = field(default_factory=list)

    def by_item(self) -> dict:
        return {row.item_id: row for row in self.rows}


def compute_utilities(ranking: RankingList, scores: Mapping,
                      verdicts: Iterable[tuple], listwise_order: list,
                      weights: UtilityWeights) -> UtilityScores:
    """ Every item needs P and a listwise rank; fallbacks fill gaps first """
    pair = utility_pairwise(
        ranking.items, verdicts, weights.c2, weights.pairwise_mode)
    list_rank = {item: n for n, item in enumerate(listwise_order, 1)}
    rows = []
    for item in ranking.items:
        m = ranking.hint_rank(item)
        m_prime = list_rank[item]
        p = float(scores[item])
        u_point = utility_pointwise(p, m, weights.c1)
        u_list = utility_listwise(m_prime, weights.c3)
        rows.append(ItemUtility(
            item, m, m_prime, p, u_point, pair[item], u_list))
    utilities = UtilityScores(ranking.user_id, rows)
    hybrid_combine(utilities, weights)
    return utilities


def hybrid_combine(utilities: UtilityScores,
                   weights: UtilityWeights) -> list:
    """
    Store u_hybrid on every row and order by it, descending; ties go to
    the better initial rank, then the lower item id.
    """
    a1, a2, a3 = weights.alpha
    for row in utilities.rows:
        row.u_hybrid = a1 * row.u_point + a2 * row.u_pair + a3 * row.u_list
    rows = sorted(
        utilities.rows,
        key=lambda r: (-r.u_hybrid, r.m, id_sort_key(r.item_id)))
    return [row.item_id for row in rows]


@dataclass
class FinalRanking:
    user_id: str
    variant: str
    items: list
    utilities: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> 'FinalRanking':
        return cls(**record)


@dataclass
class UserResults:
    """ Parsed results of one ranking list, grouped by prompt kind """
    pointwise: dict = field(default_factory=dict)
    pointwise_fix: dict = field(default_factory=dict)
    verdicts: list = field(default_factory=list)
    listwise: list | None = None


def group_results(parsed: Iterable[ParsedResult]) -> dict:
    """ user_id -> UserResults; expects fallbacks to be applied """
    grouped: dict[str, UserResults] = {}
    for result in parsed:
        group = grouped.setdefault(result.user_id, UserResults())
        if result.kind == POINTWISE:
            group.pointwise[result.payload[0]] = result.score
        elif result.kind == POINTWISE_FIX:
            group.pointwise_fix[result.payload[0]] = result.score
        elif result.kind == PAIRWISE:
            item_a, item_b = result.payload
            group.verdicts.append((item_a, item_b, result.verdict == YES))
        elif result.kind == LISTWISE:
            group.listwise = list(result.items)
    return grouped


# prompt kinds whose parses feed each variant
VARIANT_KINDS = {
    BASE: (),
    POINTWISE: (POINTWISE,),
    POINTWISE_FIX: (POINTWISE_FIX,),
    PAIRWISE: (PAIRWISE,),
    LISTWISE: (LISTWISE,),
    HYBRID: (POINTWISE, PAIRWISE, LISTWISE),
    HYBRID_FIX: (POINTWISE_FIX, PAIRWISE, LISTWISE),
}

# variant -> (pointwise source, weights index for one-hot, or None)
_VARIANT_PLAN = {
    POINTWISE: (POINTWISE, 0),
    POINTWISE_FIX: (POINTWISE_FIX, 0),
    PAIRWISE: (POINTWISE, 1),
    LISTWISE: (POINTWISE, 2),
    HYBRID: (POINTWISE, None),
    HYBRID_FIX: (POINTWISE_FIX, None),
}


def variant_weights(variant: str, weights: UtilityWeights) -> UtilityWeights:
    index = _VARIANT_PLAN[variant][1]
    return weights if index is None else weights.one_hot(index)


def rank_variant(variant: str, ranking: RankingList, results: UserResults,
                 weights: UtilityWeights) -> FinalRanking | None:
    """
    Final order for one list under one variant, or None when a component
    the variant weighs is missing.
    """
    if variant == BASE:
        return FinalRanking(ranking.user_id, BASE, list(ranking.hint_order))
    if variant not in _VARIANT_PLAN:
        raise RecRankError(f'unknown variant {variant!r}')
    source, _ = _VARIANT_PLAN[variant]
    weights = variant_weights(variant, weights)
    a1, a2, a3 = weights.alpha
    scores = getattr(results, source)
    if a1 and len(scores) < len(ranking.items):
        return None
    if a2 and weights.pairwise_mode == WIN_COUNT and not results.verdicts:
        return None
    if a3 and results.listwise is None:
        return None
    scores = {i: scores.get(i, 0.0) for i in ranking.items}
    listwise = results.listwise or list(ranking.hint_order)
    utilities = compute_utilities(
        ranking, scores, results.verdicts, listwise, weights)
    return FinalRanking(
        ranking.user_id, variant, hybrid_combine(utilities, weights),
        [asdict(row) for row in utilities.rows])


def rank_all(rankings: Iterable[RankingList], parsed: Iterable[ParsedResult],
             weights: UtilityWeights, variants: Iterable[str]) -> dict:
    """ variant -> list of FinalRanking, in ranking-list order """
    grouped = group_results(parsed)
    result = {}
    rankings = list(rankings)
    for variant in variants:
        finals, missing = [], 0
        for ranking in rankings:
            final = rank_variant(
                variant, ranking,
                grouped.get(ranking.user_id, UserResults()), weights)
            if final is None:
                missing += 1
            else:
                finals.append(final)
        if missing:
            logger.warning('variant %s: %s users lack required results',
                           variant, missing)
        if finals:
            result[variant] = finals
    return result


def write_rankings(path: str, finals: Iterable[FinalRanking]):
    write_jsonl(path, (f.as_dict() for f in finals))


def read_rankings(path: str) -> list:
    return [FinalRanking.from_dict(r) for r in read_jsonl(path)]
