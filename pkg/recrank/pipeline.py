"""
Config-driven runner chaining every stage:

    prepare -> train -> sample -> lists -> prompts -> complete -> parse
    -> rank -> evaluate

Each stage writes into a content-addressed cache directory keyed by its
input artifact hashes and the config section it reads, so reruns and
sweeps only recompute what changed.
"""
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Mapping

from django.utils.functional import cached_property

import recrank
from recrank import signals
from recrank.cache import StageArtifact, StageCache
from recrank.conf import DEFAULTS, deep_merge, set_dotted
from recrank.dataset import (
    FORMATS, RatingScale, get_format, load_prepared, prepare_dataset)
from recrank.evaluation import (
    FULL_CATALOG, ReportSet, aggregate_report, full_catalog_rankings)
from recrank.exceptions import ConfigValidationError, StageError
from recrank.gateway import (
    BackendConfig, GenerationParams, GroundTruth, TranscriptLog, get_backend,
    prompt_hash, run_batch)
from recrank.hybrid import (
    BASE, VARIANT_KINDS, VARIANTS, UtilityWeights, rank_all, read_rankings,
    write_rankings)
from recrank.parser import (
    FAILED, FALLBACK_MODES, apply_fallback, failed_users, parse_completion,
    parse_stats, read_parsed, write_parsed)
from recrank.prompts import (
    HINT_SOURCES, KINDS, PAIR_SCHEDULES, POINTWISE, TEMPLATES, PromptContext,
    build_prompts, emit_tuning_corpus, lint_leakage, read_prompts,
    write_prompts)
from recrank.ranklist import (
    INFER, TRAIN, build_infer_lists, build_train_lists, read_lists,
    write_lists)
from recrank.recommenders import (
    TrainConfig, load_model, save_model, train_recommender,
    write_embedding_export)
from recrank.sampling import (
    SampledUserSet, SamplingPlan, UserEmbeddingTable, sample_users)
from recrank.utils import (
    config_hash, derive_rng, dumps_line, file_hash, id_sort_key, read_json,
    read_jsonl, write_json, write_jsonl)

logger = logging.getLogger(__name__)

STAGES = (
    'prepare', 'train', 'sample', 'lists', 'prompts', 'complete', 'parse',
    'rank', 'evaluate')

MODEL_FILE = 'model.bin'
EMBEDDINGS_FILE = 'user_embeddings.tsv'
SAMPLES_FILE = 'samples.tsv'
TRAIN_LISTS = 'train_lists.jsonl'
INFER_LISTS = 'infer_lists.jsonl'
TRAIN_PROMPTS = 'train_prompts.jsonl'
INFER_PROMPTS = 'infer_prompts.jsonl'
COMPLETIONS_FILE = 'completions.jsonl'
PARSED_FILE = 'parsed.jsonl'
PARSE_STATS_FILE = 'parse_stats.json'
PROMPT_STATS_FILE = 'prompt_stats.json'
TRANSCRIPTS_FILE = 'transcripts.jsonl'
RUNS_LEDGER = 'runs.jsonl'

PROMPT_OPTIONS = (
    'history_liked', 'history_disliked', 'context_budget', 'pair_schedule',
    'hint_source', 'templates')
# backend fields that can change what a completion says
BACKEND_OUTPUT_FIELDS = (
    'kind', 'endpoint', 'model', 'supports_top_k', 'script', 'seed')


@dataclass
class Diagnostic:
    key: str
    message: str

    def __str__(self):
        return f'{self.key}: {self.message}'


def _prefixed(section: str, errors: Iterable[tuple]) -> list[Diagnostic]:
    return [Diagnostic(f'{section}.{key}', message) for key, message in errors]


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


@dataclass
class RunConfig:
    data: dict
    seed: int
    work_dir: str
    dataset: dict
    recommender: TrainConfig
    sampling: SamplingPlan
    ranklist: dict
    prompts: dict
    backend: BackendConfig
    generation: GenerationParams
    weights: UtilityWeights
    parser: dict
    evaluation: dict

    @classmethod
    def from_dict(cls, config: Mapping) -> 'RunConfig':
        """ Missing keys fall back to the package defaults """
        data = deep_merge(DEFAULTS, dict(config))
        seed = data['seed']
        plan_fields = {f.name for f in fields(SamplingPlan)} - {'seed'}
        return cls(
            data=data,
            seed=seed,
            work_dir=data['work_dir'],
            dataset=data['dataset'],
            recommender=TrainConfig.from_dict(data['recommender'], seed),
            sampling=SamplingPlan(seed=seed, **{
                k: v for k, v in data['sampling'].items()
                if k in plan_fields}),
            ranklist=data['ranklist'],
            prompts=data['prompts'],
            backend=BackendConfig.from_dict(data['backend']),
            generation=GenerationParams.from_dict(data['generation']),
            weights=UtilityWeights.from_dict(data['weights']),
            parser=data['parser'],
            evaluation=data['evaluation'],
        )

    @cached_property
    def hash(self) -> str:
        # the work dir says where artifacts go, not what they contain
        return config_hash(
            {k: v for k, v in self.data.items() if k != 'work_dir'})

    @property
    def scale(self) -> RatingScale:
        scale = get_format(self.dataset['tag']).scale
        like = self.dataset.get('like_threshold')
        dislike = self.dataset.get('dislike_threshold')
        return scale._replace(
            like=scale.like if like is None else like,
            dislike=scale.dislike if dislike is None else dislike)

    @property
    def domain(self) -> tuple:
        return get_format(self.dataset['tag']).domain

    @property
    def variants(self) -> list:
        return [BASE] + [v for v in self.evaluation['variants'] if v != BASE]

    def errors(self) -> list[Diagnostic]:
        result = []
        if not _is_int(self.seed):
            result.append(Diagnostic('seed', 'must be an integer'))
        result += self._dataset_errors()
        result += _prefixed('recommender', self.recommender.errors())
        result += _prefixed('sampling', self.sampling.errors())
        embeddings = self.sampling.embeddings
        if (self.sampling.uses_clustering and embeddings
                and embeddings != 'model' and not os.path.exists(embeddings)):
            result.append(Diagnostic(
                'sampling.embeddings', f'no such file: {embeddings}'))
        result += self._ranklist_errors()
        result += self._prompt_errors()
        result += _prefixed('backend', self.backend.errors())
        if self.backend.replay and not os.path.exists(self.backend.replay):
            result.append(Diagnostic(
                'backend.replay', f'no such file: {self.backend.replay}'))
        result += _prefixed('generation', self.generation.errors())
        result += _prefixed('weights', self.weights.errors())
        result += self._parser_errors()
        result += self._evaluation_errors()
        return result

    def _dataset_errors(self) -> list[Diagnostic]:
        ds, result = self.dataset, []
        if ds.get('tag') not in FORMATS:
            result.append(Diagnostic('dataset.tag', (
                f'unknown format {ds.get("tag")!r}, expected one of '
                f'{", ".join(FORMATS)}')))
        if not ds.get('raw'):
            result.append(Diagnostic('dataset.raw', 'required'))
        elif not os.path.exists(ds['raw']):
            result.append(Diagnostic(
                'dataset.raw', f'no such file or directory: {ds["raw"]}'))
        if ds.get('k_core') is not None and not (
                _is_int(ds['k_core']) and ds['k_core'] >= 1):
            result.append(Diagnostic('dataset.k_core', 'must be >= 1'))
        if ds.get('malformed_threshold', 0) < 0:
            result.append(Diagnostic(
                'dataset.malformed_threshold', 'must be >= 0'))
        if ds.get('tag') in FORMATS:
            scale = self.scale
            if not scale.low <= scale.dislike < scale.like <= scale.high:
                result.append(Diagnostic('dataset.like_threshold', (
                    f'need {scale.low:g} <= dislike < like <= '
                    f'{scale.high:g}, got {scale.dislike:g}/{scale.like:g}')))
        return result

    def _ranklist_errors(self) -> list[Diagnostic]:
        n, n_pos = self.ranklist.get('n'), self.ranklist.get('n_pos')
        if not (_is_int(n) and n >= 1):
            return [Diagnostic('ranklist.n', 'must be >= 1')]
        if not (_is_int(n_pos) and 0 < n_pos <= n):
            return [Diagnostic('ranklist.n_pos', f'must lie in 1..{n}')]
        return []

    def _prompt_errors(self) -> list[Diagnostic]:
        prompts, result = self.prompts, []
        kinds = list(prompts.get('kinds') or [])
        unknown = [k for k in kinds if k not in KINDS]
        if not kinds or unknown:
            result.append(Diagnostic(
                'prompts.kinds', f'need a subset of {", ".join(KINDS)}'))
        for name in ('history_liked', 'history_disliked'):
            if not (_is_int(prompts.get(name)) and prompts[name] >= 0):
                result.append(Diagnostic(f'prompts.{name}', 'must be >= 0'))
        if not (_is_int(prompts.get('context_budget'))
                and prompts['context_budget'] >= 1):
            result.append(Diagnostic('prompts.context_budget', 'must be >= 1'))
        if prompts.get('pair_schedule') not in PAIR_SCHEDULES:
            result.append(Diagnostic('prompts.pair_schedule', (
                f'unknown schedule {prompts.get("pair_schedule")!r}')))
        if prompts.get('hint_source') not in HINT_SOURCES:
            result.append(Diagnostic('prompts.hint_source', (
                f'unknown source {prompts.get("hint_source")!r}')))
        mix = prompts.get('mix') or {}
        if any(k not in KINDS for k in mix):
            result.append(Diagnostic('prompts.mix', 'unknown prompt kind'))
        if any(v < 0 for v in mix.values()) or not sum(mix.values()) > 0:
            result.append(Diagnostic(
                'prompts.mix', 'shares must be >= 0 with a positive sum'))
        unknown = [
            k for k in prompts.get('templates', {}) if k not in TEMPLATES]
        if unknown:
            result.append(Diagnostic(
                'prompts.templates', f'no template kind {unknown[0]!r}'))
        return result

    def _parser_errors(self) -> list[Diagnostic]:
        result = []
        threshold = self.parser.get('fuzzy_threshold')
        if not (isinstance(threshold, (int, float)) and 0 < threshold <= 1):
            result.append(Diagnostic(
                'parser.fuzzy_threshold', 'must lie in (0, 1]'))
        if self.parser.get('fallback') not in FALLBACK_MODES:
            result.append(Diagnostic('parser.fallback', (
                f'unknown mode {self.parser.get("fallback")!r}, expected '
                f'one of {", ".join(FALLBACK_MODES)}')))
        return result

    def _evaluation_errors(self) -> list[Diagnostic]:
        evaluation, result = self.evaluation, []
        ks = evaluation.get('ks') or []
        if not ks or not all(_is_int(k) and k >= 1 for k in ks):
            result.append(Diagnostic(
                'evaluation.ks', 'need one or more integers >= 1'))
        if not 0 < evaluation.get('alpha', 0) < 1:
            result.append(Diagnostic('evaluation.alpha', 'must lie in (0, 1)'))
        max_users = evaluation.get('max_users')
        if max_users is not None and not (_is_int(max_users)
                                          and max_users >= 2):
            result.append(Diagnostic('evaluation.max_users', 'must be >= 2'))
        kinds = set(self.prompts.get('kinds') or [])
        for variant in evaluation.get('variants', []):
            if variant not in VARIANTS:
                result.append(Diagnostic(
                    'evaluation.variants', f'unknown variant {variant!r}'))
                continue
            missing = [k for k in VARIANT_KINDS[variant] if k not in kinds]
            if missing:
                result.append(Diagnostic('evaluation.variants', (
                    f'{variant} needs {", ".join(missing)} prompts')))
        return result


def validate_config(config: Mapping | RunConfig) -> list[Diagnostic]:
    """ Every violation found, empty when the config is usable """
    if isinstance(config, RunConfig):
        return config.errors()
    try:
        cfg = RunConfig.from_dict(config)
    except (TypeError, ValueError) as e:
        return [Diagnostic('config', str(e))]
    return cfg.errors()


def raw_data_hash(tag: str, raw: str) -> str:
    dataset_format = get_format(tag)
    path = raw
    if os.path.isdir(raw):
        path = os.path.join(raw, dataset_format.raw_file)
    parts = {'data': file_hash(path)}
    for name in dataset_format.sidecars:
        sidecar = os.path.join(os.path.dirname(os.path.abspath(path)), name)
        if os.path.exists(sidecar):
            parts[name] = file_hash(sidecar)
    return config_hash(parts)


def variant_parse_rates(kind_stats: Mapping, variants: Iterable[str],
                        drop: bool = False) -> dict:
    """ variant -> (parse failure rate, fallback rate) over its prompts """
    rates = {}
    for variant in variants:
        entries = [kind_stats[k] for k in VARIANT_KINDS.get(variant, ())
                   if k in kind_stats]
        total = sum(e['total'] for e in entries)
        if not total:
            continue
        failure = sum(e[FAILED] for e in entries) / total
        fallback = 0.0 if drop else sum(e['fallback'] for e in entries) / total
        rates[variant] = (failure, fallback)
    return rates


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    stages: dict
    version: str
    started_at: str
    finished_at: str
    parse_failure_rate: dict = field(default_factory=dict)
    fallback_rate: dict = field(default_factory=dict)
    report_path: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)

    def executed(self) -> list:
        return [name for name, stage in self.stages.items()
                if not stage['cached']]

    def write(self, work_dir: str):
        folder = os.path.join(work_dir, 'runs', self.config_hash)
        write_json(os.path.join(folder, 'manifest.json'), self.as_dict())
        with open(os.path.join(work_dir, RUNS_LEDGER), 'a',
                  encoding='utf-8') as f:
            f.write(dumps_line(self.as_dict()) + '\n')


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.cache = StageCache(os.path.join(cfg.work_dir, 'cache'))
        self.artifacts: dict[str, StageArtifact] = {}

    def __repr__(self):
        return f'{self.__class__.__name__}({self.cfg.hash[:12]})'

    def run_stage(self, name: str, inputs: Mapping[str, str], section: Any,
                  producer: Callable[[str], None]) -> StageArtifact:
        key = self.cache.key(name, inputs, section)
        artifact = self.cache.lookup(name, key)
        if artifact is not None:
            signals.stage_skipped.send(
                sender=self.__class__, stage=name, key=key,
                path=artifact.path)
        else:
            signals.stage_started.send(
                sender=self.__class__, stage=name, key=key)
            start = time.monotonic()
            try:
                artifact = self.cache.build(name, key, producer)
            except Exception as e:
                path = self.cache.path(name, key)
                signals.stage_failed.send(
                    sender=self.__class__, stage=name, key=key, path=path,
                    exc=e)
                raise StageError(name, path, e) from e
            signals.stage_finished.send(
                sender=self.__class__, stage=name, key=key,
                path=artifact.path, output_hash=artifact.output_hash,
                seconds=time.monotonic() - start)
        self.artifacts[name] = artifact
        return artifact

    def hashes(self, *names: str) -> dict:
        return {name: self.artifacts[name].output_hash for name in names}

    def file(self, stage: str, *names: str) -> str:
        return self.artifacts[stage].file(*names)

    @cached_property
    def prepared(self):
        return load_prepared(self.artifacts['prepare'].path)

    @property
    def split(self):
        return self.prepared.split

    @cached_property
    def model(self):
        return load_model(self.file('train', MODEL_FILE))

    @cached_property
    def prompt_context(self) -> PromptContext:
        return PromptContext(
            self.split, self.prepared.catalog, self.cfg.scale,
            self.cfg.domain, self.cfg.seed,
            {k: self.cfg.prompts[k] for k in PROMPT_OPTIONS})

    def evaluation_users(self) -> list:
        users = [u for u in self.split.test_users
                 if u in self.model.user_index]
        limit = self.cfg.evaluation.get('max_users')
        if limit and len(users) > limit:
            rng = derive_rng(self.cfg.seed, 'evaluation-users')
            picks = sorted(rng.choice(len(users), size=limit, replace=False))
            users = [users[i] for i in picks]
        return users

    def prepare(self) -> StageArtifact:
        ds = self.cfg.dataset
        section = {
            'tag': ds['tag'],
            'k_core': ds.get('k_core'),
            'malformed_threshold': ds.get('malformed_threshold', 0),
            'force_timestamps': ds.get('force_timestamps', False),
            'seed': self.cfg.seed,
        }

        def produce(out):
            prepare_dataset(
                ds['tag'], ds['raw'], out, section['k_core'], self.cfg.seed,
                section['malformed_threshold'], section['force_timestamps'])

        return self.run_stage(
            'prepare', {'raw': raw_data_hash(ds['tag'], ds['raw'])}, section,
            produce)

    def train(self) -> StageArtifact:
        def produce(out):
            model = train_recommender(self.split, self.cfg.recommender)
            save_model(model, os.path.join(out, MODEL_FILE))
            write_embedding_export(model, os.path.join(out, EMBEDDINGS_FILE))
            write_json(os.path.join(out, 'history.json'), model.history)

        return self.run_stage(
            'train', self.hashes('prepare'), self.cfg.recommender.as_dict(),
            produce)

    def sample(self) -> StageArtifact:
        plan = self.cfg.sampling
        inputs = self.hashes('prepare')
        from_model = plan.uses_clustering and plan.embeddings == 'model'
        if from_model:
            inputs |= self.hashes('train')
        elif plan.uses_clustering:
            inputs['embeddings'] = file_hash(plan.embeddings)

        def produce(out):
            emb = None
            if plan.uses_clustering:
                emb = UserEmbeddingTable.read(
                    self.file('train', EMBEDDINGS_FILE) if from_model
                    else plan.embeddings)
            counts = {
                str(u): int(c) for u, c in
                self.split.train['user_id'].value_counts().items()}
            sample_users(plan, counts, emb).write(
                os.path.join(out, SAMPLES_FILE))

        return self.run_stage('sample', inputs, asdict(plan), produce)

    def lists(self) -> StageArtifact:
        section = {
            'ranklist': self.cfg.ranklist,
            'scale': self.cfg.scale._asdict(),
            'max_users': self.cfg.evaluation.get('max_users'),
            'seed': self.cfg.seed,
        }

        def produce(out):
            n, n_pos = self.cfg.ranklist['n'], self.cfg.ranklist['n_pos']
            draws = SampledUserSet.read(self.file('sample', SAMPLES_FILE))
            train_lists = build_train_lists(
                draws.draws, self.split, n, n_pos, self.cfg.seed,
                self.cfg.scale, self.model)
            infer_lists = build_infer_lists(
                self.evaluation_users(), self.model, self.split, n)
            logger.info('built %s train and %s inference lists',
                        len(train_lists), len(infer_lists))
            write_lists(os.path.join(out, TRAIN_LISTS), train_lists)
            write_lists(os.path.join(out, INFER_LISTS), infer_lists)

        return self.run_stage(
            'lists', self.hashes('prepare', 'train', 'sample'), section,
            produce)

    def prompts(self) -> StageArtifact:
        section = {
            'prompts': self.cfg.prompts,
            'scale': self.cfg.scale._asdict(),
            'domain': list(self.cfg.domain),
            'seed': self.cfg.seed,
        }

        def produce(out):
            kinds = self.cfg.prompts['kinds']
            ctx = self.prompt_context
            dropped = {INFER: [], TRAIN: []}
            infer = build_prompts(
                read_lists(self.file('lists', INFER_LISTS)), kinds, ctx,
                dropped[INFER])
            write_prompts(os.path.join(out, INFER_PROMPTS), infer)
            train = build_prompts(
                read_lists(self.file('lists', TRAIN_LISTS)), kinds, ctx,
                dropped[TRAIN])
            write_prompts(os.path.join(out, TRAIN_PROMPTS), train)
            emit_tuning_corpus(
                train, self.cfg.prompts['mix'], self.cfg.seed,
                os.path.join(out, 'corpus'), config_hash(section))
            for phase, errors in dropped.items():
                if errors:
                    logger.warning(
                        '%s %s prompts exceed the context budget of %s '
                        'tokens and were dropped', len(errors), phase,
                        ctx.budget)
            write_json(os.path.join(out, PROMPT_STATS_FILE), {
                'prompts': {INFER: len(infer), TRAIN: len(train)},
                'over_budget': {
                    phase: [e.as_dict() for e in errors]
                    for phase, errors in dropped.items()},
                'train_pointwise': sum(p.kind == POINTWISE for p in train),
                'leaky': len(lint_leakage(train)),
            })

        return self.run_stage(
            'prompts', self.hashes('prepare', 'lists'), section, produce)

    def complete(self) -> StageArtifact:
        backend = self.cfg.backend
        section = {
            'backend': {
                k: v for k, v in asdict(backend).items()
                if k in BACKEND_OUTPUT_FIELDS},
            'generation': self.cfg.generation.as_dict(),
        }
        inputs = self.hashes('prepare', 'prompts')
        if backend.replay:
            inputs['replay'] = file_hash(backend.replay)

        def produce(out):
            prompts = read_prompts(self.file('prompts', INFER_PROMPTS))
            truth = GroundTruth(
                dict(self.split.per_user_test_item),
                self.prompt_context.ratings)
            log = TranscriptLog(
                os.path.join(self.cfg.work_dir, TRANSCRIPTS_FILE),
                replay=backend.replay)
            results = run_batch(
                prompts, self.cfg.generation, get_backend(backend, truth),
                log)
            write_jsonl(os.path.join(out, COMPLETIONS_FILE), ({
                'prompt_hash': prompt_hash(r.prompt),
                'user_id': r.prompt.user_id,
                'kind': r.prompt.kind,
                'payload': r.prompt.payload,
                'text': r.text,
                'error': r.error,
            } for r in results))

        return self.run_stage('complete', inputs, section, produce)

    def parse(self) -> StageArtifact:
        section = dict(self.cfg.parser)

        def produce(out):
            prompts = read_prompts(self.file('prompts', INFER_PROMPTS))
            completions = list(read_jsonl(self.file(
                'complete', COMPLETIONS_FILE)))
            rankings = {
                r.user_id: r
                for r in read_lists(self.file('lists', INFER_LISTS))}
            results = []
            for prompt, completion in zip(prompts, completions, strict=True):
                ranking = rankings[prompt.user_id]
                result = parse_completion(
                    prompt, completion['text'], ranking,
                    self.prepared.catalog, section['fuzzy_threshold'])
                results.append(apply_fallback(result, prompt, ranking))
            write_parsed(os.path.join(out, PARSED_FILE), results)
            write_json(os.path.join(out, PARSE_STATS_FILE), {
                'kinds': parse_stats(results),
                'failed_users': sorted(
                    failed_users(results), key=id_sort_key),
            })

        return self.run_stage(
            'parse', self.hashes('prepare', 'lists', 'prompts', 'complete'),
            section, produce)

    def rank(self) -> StageArtifact:
        evaluation = self.cfg.evaluation
        full_catalog = bool(evaluation.get('full_catalog'))
        section = {
            'weights': self.cfg.weights.as_dict(),
            'variants': self.cfg.variants,
            'full_catalog': full_catalog,
            'ks': list(evaluation['ks']),
        }
        inputs = self.hashes('lists', 'parse')
        if full_catalog:
            inputs |= self.hashes('prepare', 'train')

        def produce(out):
            lists = read_lists(self.file('lists', INFER_LISTS))
            ranked = rank_all(
                lists, read_parsed(self.file('parse', PARSED_FILE)),
                self.cfg.weights, self.cfg.variants)
            if full_catalog:
                ranked[FULL_CATALOG] = full_catalog_rankings(
                    self.model, self.split, [r.user_id for r in lists],
                    max(evaluation['ks']))
            for variant, finals in ranked.items():
                write_rankings(os.path.join(out, f'{variant}.jsonl'), finals)
            write_json(os.path.join(out, 'variants.json'), list(ranked))

        return self.run_stage('rank', inputs, section, produce)

    def evaluate(self) -> StageArtifact:
        evaluation = self.cfg.evaluation
        drop = self.cfg.parser['fallback'] == 'drop'
        section = {
            'ks': list(evaluation['ks']),
            'alpha': evaluation['alpha'],
            'drop': drop,
            'config_hash': self.cfg.hash,
            'seed': self.cfg.seed,
        }

        def produce(out):
            variants = read_json(self.file('rank', 'variants.json'))
            rankings = {
                v: read_rankings(self.file('rank', f'{v}.jsonl'))
                for v in variants}
            stats = read_json(self.file('parse', PARSE_STATS_FILE))
            report = aggregate_report(
                rankings, self.split.per_user_test_item, section['ks'],
                section['alpha'],
                variant_parse_rates(stats['kinds'], variants, drop),
                stats['failed_users'] if drop else (), self.cfg.hash,
                self.cfg.seed, title=self.title)
            report.write(out)

        return self.run_stage(
            'evaluate', self.hashes('prepare', 'parse', 'rank'), section,
            produce)

    @property
    def title(self) -> str:
        return (f'{self.cfg.dataset["tag"]} / {self.cfg.recommender.model} / '
                f'{self.cfg.backend.kind}')

    def run(self, until: str | None = None) -> dict:
        if until is not None and until not in STAGES:
            raise ValueError(f'unknown stage {until!r}')
        for name in STAGES:
            getattr(self, name)()
            if name == until:
                break
        return self.artifacts

    def manifest(self, started_at: str, report: ReportSet | None = None
                 ) -> RunManifest:
        failure, fallback = {}, {}
        if report is not None:
            for item in report.reports:
                failure[item.method] = item.parse_failure_rate
                fallback[item.method] = item.fallback_rate
        return RunManifest(
            config_hash=self.cfg.hash,
            config=self.cfg.data,
            stages={n: a.as_dict() for n, a in self.artifacts.items()},
            version=recrank.__version__,
            started_at=started_at,
            finished_at=_now(),
            parse_failure_rate=failure,
            fallback_rate=fallback,
            report_path=(
                self.artifacts['evaluate'].path
                if 'evaluate' in self.artifacts else None),
        )


def run_pipeline(config: Mapping | RunConfig, until: str | None = None,
                 out: str | None = None
                 ) -> tuple[RunManifest, ReportSet | None]:
    """
    Validate, run every stage (up to ``until``) and write the manifest
    last. ``out`` receives a copy of the report and manifest.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(
        config)
    diagnostics = validate_config(cfg)
    if diagnostics:
        raise ConfigValidationError(diagnostics)
    started_at = _now()
    pipeline = Pipeline(cfg)
    pipeline.run(until)
    report = None
    if 'evaluate' in pipeline.artifacts:
        report = ReportSet.read(pipeline.artifacts['evaluate'].path)
    manifest = pipeline.manifest(started_at, report)
    manifest.write(cfg.work_dir)
    if out:
        if report is not None:
            report.write(out)
        write_json(os.path.join(out, 'manifest.json'), manifest.as_dict())
    logger.info('run %s done, executed: %s', cfg.hash[:12],
                ', '.join(manifest.executed()) or 'nothing')
    return manifest, report


def sweep(config: Mapping, key: str, values: Iterable) -> list:
    """
    One run per value of the dotted ``key``, sharing the cache. Every
    config is validated before the first run starts.
    """
    values = list(values)
    configs = [set_dotted(dict(config), key, value) for value in values]
    for value, item in zip(values, configs):
        diagnostics = validate_config(item)
        if diagnostics:
            raise ConfigValidationError([
                Diagnostic(d.key, f'{d.message} (with {key}={value!r})')
                for d in diagnostics])
    results = []
    for value, item in zip(values, configs):
        logger.info('sweep %s=%r', key, value)
        results.append(run_pipeline(item))
    return results


def log_stage_started(sender, stage, key, **kwargs):
    logger.info('stage %s started (%s)', stage, key[:12])


def log_stage_finished(sender, stage, key, seconds, path, **kwargs):
    logger.info('stage %s finished in %.2fs (%s)', stage, seconds, key[:12],
                extra={'stage': stage, 'path': path, 'seconds': seconds})


def log_stage_skipped(sender, stage, key, **kwargs):
    logger.info('stage %s cached (%s)', stage, key[:12])


def log_stage_failed(sender, stage, path, exc, **kwargs):
    logger.error('stage %s failed at %s: %s', stage, path, exc,
                 extra={'stage': stage, 'path': path})


def log_request_failed(sender, prompt, error, **kwargs):
    logger.warning('%s request for user %s failed: %s',
                   prompt.kind, prompt.user_id, error,
                   extra={'user_id': prompt.user_id, 'kind': prompt.kind})


def connect_log_receivers():
    for signal, receiver in (
            (signals.stage_started, log_stage_started),
            (signals.stage_finished, log_stage_finished),
            (signals.stage_skipped, log_stage_skipped),
            (signals.stage_failed, log_stage_failed),
            (signals.request_failed, log_request_failed)):
        signal.connect(receiver, dispatch_uid=f'recrank.{receiver.__name__}')
