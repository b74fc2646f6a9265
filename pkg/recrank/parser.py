"""
Turns raw completions back into rankings, scores and verdicts. Parsing
is total: every text gives exactly one ``ParsedResult``.
"""
import re
import string
from dataclasses import asdict, dataclass, field
from typing import Container, Iterable, Mapping

from recrank.dataset import Catalog
from recrank.prompts import (
    LISTWISE, PAIRWISE, POINTWISE, POINTWISE_FIX, PromptInstance)
from recrank.ranklist import RankingList
from recrank.utils import read_jsonl, write_jsonl

OK = 'ok'
PARTIAL = 'partial'
FAILED = 'failed'
YES = 'yes'
NO = 'no'

SCORE_LOW = 1.0
SCORE_HIGH = 5.0
NEUTRAL_SCORE = 3.0
TOP_N = 5
FALLBACK_MODES = ('hint', 'drop')

_NUMBERING = re.compile(r'(?:^|(?<=\s))\(?\d{1,2}[.)]\s+')
_NUMBER = re.compile(r'-?\d+(?:\.\d+)?')
_YEAR = re.compile(r'\s*\(\d{4}\)\s*$')
_ARTICLE = re.compile(r'^(.*), (the|a|an)$')
_PUNCT = str.maketrans({c: ' ' for c in string.punctuation})


@dataclass
class ParsedResult:
    kind: str
    user_id: str
    payload: list
    status: str
    items: list | None = None
    score: float | None = None
    verdict: str | None = None
    fallback_applied: bool = False
    notes: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.status == FAILED

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> 'ParsedResult':
        return cls(**record)


def normalize_title(title: str, drop_year: bool = False) -> str:
    """ Lower-case, punctuation-free form; "Usual Suspects, The" reads
    as "the usual suspects" """
    text = ' '.join(title.lower().split())
    match = _YEAR.search(text)
    year = match.group(0).strip() if match and not drop_year else ''
    base = _YEAR.sub('', text)
    article = _ARTICLE.match(base)
    if article:
        base = f'{article.group(2)} {article.group(1)}'
    return ' '.join(f'{base} {year}'.translate(_PUNCT).split())


def token_set_similarity(a: str, b: str) -> float:
    left, right = set(a.split()), set(b.split())
    if not left or not right:
        return 0.0
    return len(left & right) / len(left | right)


def split_titles(raw: str) -> list[str]:
    """ Numbered entries when there is numbering, else lines or commas """
    text = raw.strip()
    if _NUMBERING.search(text):
        parts = _NUMBERING.split(text)[1:]
    elif '\n' in text:
        parts = text.splitlines()
    else:
        parts = re.split(r'[;,]\s*', text)
    result = []
    for part in parts:
        part = part.strip().strip(',;').strip()
        part = part.strip('"\'*').strip()
        if part:
            result.append(part)
    return result


class TitleResolver:
    """ exact -> normalized -> normalized without year -> token-set

    Every title keys the ids that carry it, in candidate order, so
    same-titled candidates are handed out one mention at a time.
    """

    def __init__(self, titles: Mapping[str, str], threshold: float = 0.9):
        self.threshold = threshold
        self.exact = {}
        self.normalized = {}
        self.yearless = {}
        for item_id, title in titles.items():
            self.exact.setdefault(title, []).append(item_id)
            self.normalized.setdefault(
                normalize_title(title), []).append(item_id)
            self.yearless.setdefault(
                normalize_title(title, drop_year=True), []).append(item_id)

    @staticmethod
    def pick(ids: list, taken: Container) -> str:
        for item_id in ids:
            if item_id not in taken:
                return item_id
        return ids[0]

    def resolve(self, text: str, taken: Container = ()) -> str | None:
        if text in self.exact:
            return self.pick(self.exact[text], taken)
        key = normalize_title(text)
        if key in self.normalized:
            return self.pick(self.normalized[key], taken)
        bare = normalize_title(text, drop_year=True)
        if bare in self.yearless:
            return self.pick(self.yearless[bare], taken)
        best, best_score = None, self.threshold
        for candidate, ids in self.normalized.items():
            score = token_set_similarity(key, candidate)
            if score >= best_score and (best is None or score > best_score):
                best, best_score = ids, score
        return None if best is None else self.pick(best, taken)


def candidate_titles(ranking: RankingList, catalog: Catalog) -> dict:
    """ Raises ``MissingTitleError`` for a candidate outside the catalog """
    return {item_id: catalog.title(item_id) for item_id in ranking.hint_order}


def parse_listwise(raw: str, ranking: RankingList, catalog: Catalog,
                   threshold: float = 0.9) -> ParsedResult:
    resolver = TitleResolver(candidate_titles(ranking, catalog), threshold)
    resolved, notes = [], []
    for title in split_titles(raw or ''):
        item_id = resolver.resolve(title, resolved)
        if item_id is None:
            notes.append(f'unmatched title {title[:60]!r}')
        elif item_id in resolved:
            notes.append(f'duplicate title {title[:60]!r}')
        else:
            resolved.append(item_id)
    base = dict(kind=LISTWISE, user_id=ranking.user_id,
                payload=list(ranking.items))
    if not resolved:
        return ParsedResult(status=FAILED, notes=notes, **base)
    expected = min(TOP_N, len(ranking.items))
    if len(resolved) < expected:
        notes.append(f'{len(resolved)} of {expected} titles resolved')
    items = resolved + [i for i in ranking.hint_order if i not in resolved]
    return ParsedResult(
        status=PARTIAL if notes else OK, items=items, notes=notes, **base)


def parse_pointwise(raw: str, user_id: str = '',
                    payload: list | None = None,
                    kind: str = POINTWISE) -> ParsedResult:
    base = dict(kind=kind, user_id=user_id, payload=list(payload or []))
    numbers = [float(n) for n in _NUMBER.findall(raw or '')]
    if not numbers:
        return ParsedResult(status=FAILED, notes=['no number'], **base)
    for number in numbers:
        if SCORE_LOW <= number <= SCORE_HIGH:
            return ParsedResult(status=OK, score=number, **base)
    clamped = min(max(numbers[0], SCORE_LOW), SCORE_HIGH)
    return ParsedResult(
        status=PARTIAL, score=clamped,
        notes=[f'clamped {numbers[0]:g} to {clamped:g}'], **base)


def parse_pairwise(raw: str, user_id: str = '',
                   payload: list | None = None) -> ParsedResult:
    base = dict(kind=PAIRWISE, user_id=user_id, payload=list(payload or []))
    tokens = (raw or '').lower().translate(_PUNCT).split()
    if not tokens or (YES in tokens and NO in tokens):
        return ParsedResult(status=FAILED, notes=['ambiguous verdict'], **base)
    if tokens[0] in (YES, NO):
        return ParsedResult(status=OK, verdict=tokens[0], **base)
    return ParsedResult(status=FAILED, notes=['no leading yes/no'], **base)


def parse_completion(prompt: PromptInstance, text: str | None,
                     ranking: RankingList, catalog: Catalog,
                     threshold: float = 0.9) -> ParsedResult:
    if text is None:
        result = ParsedResult(
            prompt.kind, prompt.user_id, list(prompt.payload), FAILED,
            notes=['completion failed'])
    elif prompt.kind == LISTWISE:
        result = parse_listwise(text, ranking, catalog, threshold)
    elif prompt.kind == PAIRWISE:
        result = parse_pairwise(text, prompt.user_id, prompt.payload)
    else:
        result = parse_pointwise(
            text, prompt.user_id, prompt.payload, prompt.kind)
    return result


def apply_fallback(result: ParsedResult, prompt: PromptInstance,
                   ranking: RankingList) -> ParsedResult:
    """
    Replace a failed parse with the initial model's answer: hint order,
    hint score (3.0 when the prompt carried none) or hint winner.
    """
    if not result.failed:
        return result
    values = asdict(result)
    values['fallback_applied'] = True
    if result.kind == LISTWISE:
        values['items'] = list(ranking.hint_order)
    elif result.kind in (POINTWISE, POINTWISE_FIX):
        values['score'] = (
            float(prompt.hint) if result.kind == POINTWISE and prompt.hint
            else NEUTRAL_SCORE)
    else:
        winner = prompt.meta.get('hint_winner')
        values['verdict'] = YES if winner == prompt.payload[0] else NO
    return ParsedResult(**values)


def fallback_rate(results: Iterable[ParsedResult]) -> float:
    results = list(results)
    if not results:
        return 0.0
    return sum(r.fallback_applied for r in results) / len(results)


def failed_users(results: Iterable[ParsedResult]) -> set:
    return {r.user_id for r in results if r.failed}


def write_parsed(path: str, results: Iterable[ParsedResult]):
    write_jsonl(path, (r.as_dict() for r in results))


def read_parsed(path: str) -> list:
    return [ParsedResult.from_dict(r) for r in read_jsonl(path)]


def parse_stats(results: Iterable[ParsedResult]) -> dict:
    """ kind -> counts of ok / partial / failed parses and fallbacks """
    stats: dict[str, dict] = {}
    for result in results:
        entry = stats.setdefault(result.kind, {
            'total': 0, OK: 0, PARTIAL: 0, FAILED: 0, 'fallback': 0})
        entry['total'] += 1
        entry[result.status] += 1
        entry['fallback'] += int(result.fallback_applied)
    return stats
