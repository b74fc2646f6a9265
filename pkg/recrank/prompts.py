"""
Prompt rendering for the three ranking strategies and the instruction
tuning corpus built from train-phase prompts.

Templates are Django templates rendered without autoescaping; the
``prompts.templates`` config section can replace any of them by kind.
"""
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple

import pandas as pd
from django.template import Context, Engine
from django.utils.functional import cached_property

from recrank.dataset import FIVE_POINT, Catalog, DatasetSplit, RatingScale
from recrank.exceptions import (
    CorpusError, PromptBudgetError, PromptError)
from recrank.ranklist import INFER, TRAIN, RankingList, scaled_hint_scores
from recrank.utils import (
    config_hash, derive_rng, file_hash, read_jsonl, write_json, write_jsonl)

logger = logging.getLogger(__name__)

LISTWISE = 'listwise'
POINTWISE = 'pointwise'
POINTWISE_FIX = 'pointwise_fix'
PAIRWISE = 'pairwise'
KINDS = (LISTWISE, POINTWISE, POINTWISE_FIX, PAIRWISE)

TOP_N_ANSWER = 5
YES = 'Yes.'
NO = 'No.'
EMPTY_SLOT = 'None'
PAIR_SCHEDULES = ('adjacent', 'round_robin')
HINT_SOURCES = ('model', 'ratings')

_HISTORY = (
    "User's Liked {{ plural }}: {{ liked }}.\n"
    "User's Disliked {{ plural }}: {{ disliked }}.\n")

TEMPLATES = {
    LISTWISE: (
        'You are a {{ word }} recommender system. Your task is to rank a '
        'given list of candidate {{ plural }} based on user preferences and '
        'return the top five recommendations.\n'
        + _HISTORY
        + 'Question: How would the user rank the candidate item list: '
          '{{ candidates }}?\n'
          'Hint: Another recommender model suggests {{ hint }}.'),
    POINTWISE: (
        'You are a {{ word }} recommender system. Your task is to predict '
        'the relevance score to a target {{ word }} based on the user\'s '
        'historical {{ word }} ratings.\n'
        'The score should be between 1 and 5.\n'
        + _HISTORY
        + "Question: Based on the user's historical ratings, predict the "
          'relevance score of the target {{ word }} {{ target }} with the '
          'user.'
          '{% if hint %}\nHint: Another recommender model suggests the '
          'answer is {{ hint }}.{% endif %}'),
    PAIRWISE: (
        'You are a {{ word }} recommender system. Based on a user\'s likes '
        'and dislikes, determine if they would prefer one {{ word }} over '
        'another. Respond only with "Yes." or "No.".\n'
        + _HISTORY
        + 'Question: Would the user prefer {{ item_a }} over {{ item_b }}?\n'
          'Hint: Another recommender model suggests the answer is '
          '{{ winner }}.'),
}

engine = Engine(autoescape=False)


@dataclass
class PromptInstance:
    kind: str
    text: str
    user_id: str
    payload: list
    hint: str | None = None
    expected_answer: str | None = None
    phase: str = INFER
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PromptError(f'unknown prompt kind {self.kind!r}')
        if self.phase == INFER and self.expected_answer:
            raise PromptError('inference prompts carry no expected answer')

    @property
    def family(self) -> str:
        """ pointwise_fix prompts are parsed and scored as pointwise """
        return POINTWISE if self.kind == POINTWISE_FIX else self.kind

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> 'PromptInstance':
        return cls(**record)


class TuningExample(NamedTuple):
    instruction: str
    input: str
    output: str

    def as_dict(self) -> dict:
        return self._asdict()


@dataclass
class UserHistory:
    """ Liked and disliked item ids, oldest first """
    liked: list = field(default_factory=list)
    disliked: list = field(default_factory=list)

    def without_oldest(self) -> 'UserHistory':
        if not self.liked and not self.disliked:
            raise PromptBudgetError('history is already empty')
        # the longer list gives up its oldest entry first
        if len(self.liked) >= len(self.disliked):
            return UserHistory(self.liked[1:], self.disliked)
        return UserHistory(self.liked, self.disliked[1:])


def select_history(split: DatasetSplit, user_id, scale: RatingScale,
                   seed: int, max_liked: int = 20, max_disliked: int = 20,
                   exclude: Iterable = ()) -> UserHistory:
    """
    Random subsets of the user's liked and disliked train interactions,
    listed chronologically. Items in ``exclude`` never appear.
    """
    rows = split.history(str(user_id))
    rows = rows[~rows['item_id'].isin(set(exclude))]
    rows = rows.sort_values(['timestamp', 'item_id'], kind='mergesort')
    rng = derive_rng(seed, 'history', user_id)

    def pick(mask, limit):
        chosen = rows[mask]
        if len(chosen) > limit:
            keep = sorted(rng.choice(len(chosen), size=limit, replace=False))
            chosen = chosen.iloc[keep]
        return list(chosen['item_id'])

    return UserHistory(
        pick(rows['rating'] >= scale.like, max_liked),
        pick(rows['rating'] <= scale.dislike, max_disliked))


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def numbered(titles: Iterable[str], sep: str = ', ') -> str:
    titles = list(titles)
    if not titles:
        return EMPTY_SLOT
    return sep.join(f'{n}. {t}' for n, t in enumerate(titles, 1))


def format_score(score: float) -> str:
    return f'{score:.1f}'


class PromptContext:
    """ Everything rendering needs besides the list itself """

    def __init__(self, split: DatasetSplit, catalog: Catalog,
                 scale: RatingScale = FIVE_POINT,
                 domain: tuple = ('movie', 'movies'), seed: int = 0,
                 options: Mapping | None = None):
        options = dict(options or {})
        self.split = split
        self.catalog = catalog
        self.scale = scale
        self.domain = tuple(domain)
        self.seed = seed
        self.max_liked = options.get('history_liked', 20)
        self.max_disliked = options.get('history_disliked', 20)
        self.budget = options.get('context_budget', 2048)
        self.pair_schedule = options.get('pair_schedule', 'adjacent')
        self.hint_source = options.get('hint_source', 'model')
        self.templates = {**TEMPLATES, **options.get('templates', {})}

    @cached_property
    def compiled(self) -> dict:
        return {k: engine.from_string(v) for k, v in self.templates.items()}

    @cached_property
    def ratings(self) -> dict:
        """ user -> item -> rating on the 1..5 scale, train and test """
        frame = pd.concat([self.split.train, self.split.test])
        result: dict[str, dict] = {}
        for u, i, r in zip(frame['user_id'], frame['item_id'],
                           frame['rating']):
            result.setdefault(u, {})[i] = self.scale.to_five_point(float(r))
        return result

    def user_ratings(self, user_id) -> dict:
        return self.ratings.get(str(user_id), {})

    def history(self, user_id, exclude=()) -> UserHistory:
        return select_history(
            self.split, user_id, self.scale, self.seed, self.max_liked,
            self.max_disliked, exclude)

    def title(self, item_id) -> str:
        return self.catalog.title(item_id)

    def render(self, kind: str, values: dict, history: UserHistory,
               user_id, payload: Iterable = ()) -> str:
        """
        Render with the history, dropping the oldest history entries until
        the estimate fits the context budget.
        """
        template = self.compiled[POINTWISE if kind == POINTWISE_FIX else kind]
        word, plural = self.domain
        while True:
            text = template.render(Context({
                'word': word, 'plural': plural,
                'liked': numbered(self.title(i) for i in history.liked),
                'disliked': numbered(self.title(i) for i in history.disliked),
                **values,
            }))
            if estimate_tokens(text) <= self.budget:
                return text
            try:
                history = history.without_oldest()
            except PromptBudgetError:
                raise PromptBudgetError(
                    f'{kind} prompt for user {user_id} needs '
                    f'{estimate_tokens(text)} tokens, budget {self.budget}',
                    kind, str(user_id), payload) from None


def build_listwise_prompt(ranking: RankingList, history: UserHistory,
                          ctx: PromptContext) -> PromptInstance:
    if not ranking.items:
        raise PromptError(f'user {ranking.user_id}: empty ranking list')
    hint_titles = [ctx.title(i) for i in ranking.hint_order]
    hint = numbered(hint_titles)
    text = ctx.render(LISTWISE, {
        'candidates': numbered(ctx.title(i) for i in ranking.items),
        'hint': hint,
    }, history, ranking.user_id, ranking.items)
    expected = None
    if ranking.phase == TRAIN:
        expected = numbered(
            (ctx.title(i) for i in ranking.gold_order[:TOP_N_ANSWER]),
            sep='\n')
    return PromptInstance(
        LISTWISE, text, ranking.user_id, list(ranking.items), hint,
        expected, ranking.phase, {
            'hint_order': list(ranking.hint_order),
            'hint_titles': hint_titles,
        })


def build_pointwise_prompt(user_id, target, history: UserHistory,
                           ctx: PromptContext,
                           hint_score: float | None = None,
                           fix: bool = False, phase: str = INFER,
                           gold_score: float | None = None,
                           hint_rank: int | None = None) -> PromptInstance:
    if not fix and hint_score is None:
        raise PromptError(
            f'pointwise prompt for item {target} needs a hint score')
    hint = None if fix else format_score(hint_score)
    text = ctx.render(POINTWISE_FIX if fix else POINTWISE, {
        'target': ctx.title(target), 'hint': hint,
    }, history, user_id, [target])
    expected = None
    if phase == TRAIN:
        expected = format_score(
            gold_score if gold_score is not None else ctx.scale.to_five_point(
                ctx.scale.low))
    return PromptInstance(
        POINTWISE_FIX if fix else POINTWISE, text, str(user_id), [target],
        hint, expected, phase, {'hint_rank': hint_rank})


def build_pairwise_prompt(user_id, item_a, item_b, history: UserHistory,
                          ctx: PromptContext, hint_winner,
                          phase: str = INFER,
                          gold_prefers_a: bool | None = None
                          ) -> PromptInstance:
    if item_a == item_b:
        raise PromptError(f'pairwise prompt compares {item_a} with itself')
    if hint_winner not in (item_a, item_b):
        raise PromptError(
            f'hint winner {hint_winner} is not in pair ({item_a}, {item_b})')
    winner = ctx.title(hint_winner)
    text = ctx.render(PAIRWISE, {
        'item_a': ctx.title(item_a), 'item_b': ctx.title(item_b),
        'winner': winner,
    }, history, user_id, [item_a, item_b])
    expected = None
    if phase == TRAIN:
        if gold_prefers_a is None:
            raise PromptError('train pairwise prompt needs a gold preference')
        expected = YES if gold_prefers_a else NO
    return PromptInstance(
        PAIRWISE, text, str(user_id), [item_a, item_b], winner, expected,
        phase, {'hint_winner': hint_winner})


def leaky_hint_score(item_id, user_ratings: Mapping) -> float:
    """
    Hint used by train-phase pointwise prompts: the user's own rating for
    interacted items, 0.0 otherwise. Equal to the gold answer whenever the
    item was rated, which is the leak ``lint_leakage`` reports.
    """
    return float(user_ratings.get(item_id, 0.0))


def rank_hint_scores(ranking: RankingList) -> dict:
    """ 5.0 for the first hinted item down to 1.0 for the last """
    n = len(ranking.hint_order)
    if n == 1:
        return {ranking.hint_order[0]: 5.0}
    return {
        item: round(5.0 - 4.0 * pos / (n - 1), 1)
        for pos, item in enumerate(ranking.hint_order)}


def pointwise_hints(ranking: RankingList, ctx: PromptContext) -> dict:
    if ranking.phase == TRAIN or ctx.hint_source == 'ratings':
        ratings = ctx.user_ratings(ranking.user_id)
        return {i: leaky_hint_score(i, ratings) for i in ranking.items}
    return scaled_hint_scores(ranking) or rank_hint_scores(ranking)


def pair_schedule(ranking: RankingList, schedule: str = 'adjacent') -> list:
    """ Pairs (better, worse) in hint order """
    order = ranking.hint_order
    if schedule == 'adjacent':
        return list(zip(order, order[1:]))
    if schedule == 'round_robin':
        return [(a, b) for n, a in enumerate(order) for b in order[n + 1:]]
    raise PromptError(f'unknown pair schedule {schedule!r}')


def _listwise(ranking, ctx, fit):
    history = ctx.history(ranking.user_id, exclude=ranking.items)
    return fit(build_listwise_prompt, ranking, history, ctx)


def _pointwise(ranking, ctx, fit, fix=False):
    history = ctx.history(ranking.user_id, exclude=ranking.items)
    hints = {} if fix else pointwise_hints(ranking, ctx)
    ratings = ctx.user_ratings(ranking.user_id)
    result = []
    for item in ranking.items:
        result.extend(fit(
            build_pointwise_prompt, ranking.user_id, item, history, ctx,
            hints.get(item), fix, ranking.phase, ratings.get(item),
            ranking.hint_rank(item)))
    return result


def _pairwise(ranking, ctx, fit):
    history = ctx.history(ranking.user_id, exclude=ranking.items)
    gold = {item: n for n, item in enumerate(ranking.gold_order)}
    result = []
    for better, worse in pair_schedule(ranking, ctx.pair_schedule):
        # the hinted winner is shown first or second at random
        rng = derive_rng(ctx.seed, 'pair', ranking.user_id, better, worse)
        a, b = (better, worse) if rng.random() < 0.5 else (worse, better)
        prefers_a = None
        if ranking.phase == TRAIN:
            prefers_a = gold[a] < gold[b]
        result.extend(fit(
            build_pairwise_prompt, ranking.user_id, a, b, history, ctx,
            better, ranking.phase, prefers_a))
    return result


BUILDERS: dict[str, Callable] = {
    LISTWISE: _listwise,
    POINTWISE: _pointwise,
    POINTWISE_FIX: lambda ranking, ctx, fit: _pointwise(
        ranking, ctx, fit, fix=True),
    PAIRWISE: _pairwise,
}


def build_prompts(rankings: Iterable[RankingList], kinds: Iterable[str],
                  ctx: PromptContext,
                  over_budget: list | None = None) -> list:
    """
    Prompts for every list and kind. When ``over_budget`` is a list, a
    prompt that cannot fit the context budget even with an empty history
    is left out and its ``PromptBudgetError`` appended there; otherwise
    the error propagates.
    """
    kinds = list(kinds)
    unknown = [k for k in kinds if k not in BUILDERS]
    if unknown:
        raise PromptError(f'unknown prompt kinds {unknown}')

    def fit(build, *args) -> list:
        try:
            return [build(*args)]
        except PromptBudgetError as e:
            if over_budget is None:
                raise
            logger.warning('%s, prompt dropped', e)
            over_budget.append(e)
            return []

    result = []
    for ranking in rankings:
        for kind in kinds:
            result.extend(BUILDERS[kind](ranking, ctx, fit))
    return result


@dataclass
class LeakageReport:
    user_id: str
    item_id: str
    hint: str
    expected_answer: str


def lint_leakage(instances: Iterable[PromptInstance]) -> list:
    """ Train-phase pointwise prompts whose hint equals the gold answer """
    return [
        LeakageReport(p.user_id, p.payload[0], p.hint, p.expected_answer)
        for p in instances
        if p.kind == POINTWISE and p.phase == TRAIN and p.hint is not None
        and p.hint == p.expected_answer]


def _mix_key(kind: str, mix: Mapping) -> str | None:
    if kind in mix:
        return kind
    if kind == POINTWISE_FIX and POINTWISE in mix:
        return POINTWISE
    return None


def emit_tuning_corpus(instances: list, mix: Mapping, seed: int, out: str,
                       settings_hash: str = '') -> dict:
    """
    Write ``corpus.jsonl`` (instruction/input/output records, shuffled per
    seed) and ``manifest.json`` into ``out``. Each mix key takes
    round(share * total) of its instances, never more than exist.
    """
    bad = [p for p in instances if p.phase != TRAIN or not p.expected_answer]
    if bad:
        raise CorpusError(
            f'{len(bad)} instances are not train-phase examples, first: '
            f'{bad[0].kind} for user {bad[0].user_id}')
    groups: dict[str, list] = {}
    for instance in instances:
        key = _mix_key(instance.kind, mix)
        if key is None:
            logger.info('no mix share for %s prompts, skipped',
                        instance.kind)
            continue
        groups.setdefault(key, []).append(instance)

    total = len(instances)
    chosen, counts = [], {}
    for key in sorted(groups):
        group = groups[key]
        quota = round(mix[key] * total)
        if quota > len(group):
            logger.warning('mix asks for %s %s examples, only %s exist',
                           quota, key, len(group))
            quota = len(group)
        rng = derive_rng(seed, 'corpus-pick', key)
        picks = sorted(rng.choice(len(group), size=quota, replace=False))
        chosen.extend(group[i] for i in picks)
        counts[key] = quota
    order = derive_rng(seed, 'corpus-shuffle').permutation(len(chosen))
    examples = [
        TuningExample(chosen[i].text, '', chosen[i].expected_answer)
        for i in order]

    os.makedirs(out, exist_ok=True)
    corpus_path = os.path.join(out, 'corpus.jsonl')
    write_jsonl(corpus_path, (e.as_dict() for e in examples))
    manifest = {
        'counts': counts,
        'total': len(examples),
        'seed': seed,
        'mix': dict(mix),
        'config_hash': settings_hash or config_hash(dict(mix)),
        'corpus_sha256': file_hash(corpus_path),
        'leaky_examples': len(lint_leakage(chosen)),
    }
    write_json(os.path.join(out, 'manifest.json'), manifest)
    return manifest


def write_prompts(path: str, instances: Iterable[PromptInstance]):
    write_jsonl(path, (p.as_dict() for p in instances))


def read_prompts(path: str) -> list:
    return [PromptInstance.from_dict(r) for r in read_jsonl(path)]