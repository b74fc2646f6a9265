import io
import json
import os

from django.core.management import call_command
from django.core.management.base import CommandError

import pytest

from recrank import pipeline
from recrank.exceptions import ConfigValidationError, StageError
from recrank.hybrid import BASE, VARIANTS
from recrank.management.commands.sweep import parse_vary
from recrank.utils import read_json, read_jsonl
from tests.utils import pipeline_config


def _keys(diagnostics):
    return [d.key for d in diagnostics]


def test_defaults_with_raw_are_valid(raw_dataset):
    config = {'dataset': {'tag': 'generic-tsv', 'raw': raw_dataset}}
    assert pipeline.validate_config(config) == []


def test_raw_is_required():
    assert 'dataset.raw' in _keys(pipeline.validate_config({}))


@pytest.mark.parametrize('section, values, key', [
    ('sampling', {'penalty_c': 1.5}, 'sampling.penalty_c'),
    ('sampling', {'penalty_c': 0}, 'sampling.penalty_c'),
    ('sampling', {'embeddings': '/no/such/embeddings.tsv'},
     'sampling.embeddings'),
    ('weights', {'alpha': [0.5, 0.5, 0.5]}, 'weights.alpha'),
    ('ranklist', {'n': 4, 'n_pos': 5}, 'ranklist.n_pos'),
    ('parser', {'fallback': 'guess'}, 'parser.fallback'),
    ('evaluation', {'alpha': 1.0}, 'evaluation.alpha'),
    ('prompts', {'kinds': ['listwise']}, 'evaluation.variants'),
])
def test_config_diagnostics(run_config, section, values, key):
    config = pipeline_config(
        run_config['work_dir'], run_config['dataset']['raw'],
        **{section: values})
    assert key in _keys(pipeline.validate_config(config))


def test_invalid_config_runs_nothing(run_config, stage_signals):
    run_config['weights'] = {'alpha': [0.6, 0.6, 0.6]}
    with pytest.raises(ConfigValidationError) as e:
        pipeline.run_pipeline(run_config)
    assert _keys(e.value.diagnostics) == ['weights.alpha']
    assert not stage_signals['stage_started']
    assert not os.path.exists(run_config['work_dir'])


def test_config_hash_ignores_work_dir(run_config):
    moved = dict(run_config, work_dir='/elsewhere')
    assert pipeline.RunConfig.from_dict(run_config).hash == \
        pipeline.RunConfig.from_dict(moved).hash


def test_echo_run_matches_base(run_config, stage_signals):
    manifest, report = pipeline.run_pipeline(run_config)

    assert manifest.executed() == list(pipeline.STAGES)
    assert [s['stage'] for s in stage_signals['stage_finished']] == \
        list(pipeline.STAGES)
    assert {r.method for r in report.reports} == set(VARIANTS)
    base = report.report(BASE).metrics
    for variant in VARIANTS:
        metrics = report.report(variant).metrics
        assert set(metrics) == {'H@3', 'N@3', 'H@5', 'N@5'}
        for name, value in metrics.items():
            assert value == pytest.approx(base[name], abs=1e-12), variant
        assert not any(report.report(variant).stars.values())
    # every echo completion parses
    assert all(rate == 0.0 for rate in manifest.parse_failure_rate.values())
    assert manifest.report_path == manifest.stages['evaluate']['path']
    prompt_stats = read_json(os.path.join(
        manifest.stages['prompts']['path'], pipeline.PROMPT_STATS_FILE))
    assert prompt_stats['over_budget'] == {'infer': [], 'train': []}
    assert prompt_stats['prompts']['infer'] > 0

    work_dir = run_config['work_dir']
    saved = read_json(os.path.join(
        work_dir, 'runs', manifest.config_hash, 'manifest.json'))
    assert saved['config_hash'] == manifest.config_hash
    assert len(list(read_jsonl(os.path.join(work_dir, 'runs.jsonl')))) == 1


def test_rerun_is_fully_cached(run_config, stage_signals):
    first, _ = pipeline.run_pipeline(run_config)
    second, _ = pipeline.run_pipeline(run_config)

    assert second.executed() == []
    assert [s['stage'] for s in stage_signals['stage_skipped']] == \
        list(pipeline.STAGES)
    assert {n: s['output_hash'] for n, s in first.stages.items()} == \
        {n: s['output_hash'] for n, s in second.stages.items()}


def test_reports_are_byte_identical(tmp_path, raw_dataset):
    reports = []
    for name in ('one', 'two'):
        config = pipeline_config(str(tmp_path / name), raw_dataset)
        manifest, _ = pipeline.run_pipeline(config)
        with open(os.path.join(manifest.report_path, 'report.json'),
                  'rb') as f:
            reports.append(f.read())
    assert reports[0] == reports[1]


def test_weight_change_reruns_rank_and_evaluate(run_config):
    pipeline.run_pipeline(run_config)
    run_config['weights'] = {'alpha': [1.0, 0.0, 0.0]}

    manifest, _ = pipeline.run_pipeline(run_config)

    assert manifest.executed() == ['rank', 'evaluate']


def test_parser_change_keeps_completions(run_config):
    pipeline.run_pipeline(run_config)
    run_config['parser'] = {'fuzzy_threshold': 0.8}

    manifest, _ = pipeline.run_pipeline(run_config)

    assert manifest.executed() == ['parse', 'evaluate']


def test_run_until(run_config):
    manifest, report = pipeline.run_pipeline(run_config, until='lists')
    assert report is None
    assert list(manifest.stages) == list(pipeline.STAGES[:4])
    assert manifest.report_path is None
    with pytest.raises(ValueError):
        pipeline.run_pipeline(run_config, until='deploy')


def test_full_catalog_method(run_config):
    run_config['evaluation'] = {'full_catalog': True}
    _, report = pipeline.run_pipeline(run_config)
    assert 'base_full_catalog' in {r.method for r in report.reports}


def test_failed_stage(monkeypatch, run_config, stage_signals):
    def broken(split, config):
        raise RuntimeError('out of memory')

    monkeypatch.setattr(pipeline, 'train_recommender', broken)

    with pytest.raises(StageError) as e:
        pipeline.run_pipeline(run_config)

    assert e.value.stage == 'train'
    assert 'out of memory' in str(e.value)
    [failed] = stage_signals['stage_failed']
    assert failed['stage'] == 'train'
    assert os.listdir(os.path.join(run_config['work_dir'], 'cache', 'train')) \
        == []

    monkeypatch.undo()
    manifest, _ = pipeline.run_pipeline(run_config)
    assert manifest.executed() == list(pipeline.STAGES[1:])


def test_sweep_shares_cache(run_config):
    results = pipeline.sweep(run_config, 'weights.c1', [0.1, 0.2])

    (first, _), (second, report) = results
    assert first.config_hash != second.config_hash
    assert second.executed() == ['rank', 'evaluate']
    assert report is not None


def test_sweep_validates_every_value_first(run_config, stage_signals):
    with pytest.raises(ConfigValidationError) as e:
        pipeline.sweep(run_config, 'sampling.penalty_c', [0.5, 2.0])
    assert 'sampling.penalty_c=2.0' in str(e.value)
    assert not stage_signals['stage_started']


@pytest.mark.parametrize('text, key, values', [
    ('weights.c1=0.1,0.2', 'weights.c1', [0.1, 0.2]),
    ('parser.fallback=hint,drop', 'parser.fallback', ['hint', 'drop']),
    ('weights.alpha=[[1,0,0],[0,1,0]]', 'weights.alpha',
     [[1, 0, 0], [0, 1, 0]]),
])
def test_parse_vary(text, key, values):
    assert parse_vary(text) == (key, values)


def test_parse_vary_needs_values():
    with pytest.raises(CommandError) as e:
        parse_vary('weights.c1')
    assert e.value.returncode == 2


def _config_file(tmp_path, config):
    path = str(tmp_path / 'config.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config, f)
    return path


def test_run_command(tmp_path, run_config):
    out = io.StringIO()
    call_command(
        'run', config=_config_file(tmp_path, run_config),
        out=str(tmp_path / 'out'), stdout=out)
    assert 'executed prepare, train' in out.getvalue()
    assert os.path.exists(str(tmp_path / 'out' / 'report.json'))
    assert os.path.exists(str(tmp_path / 'out' / 'manifest.json'))


def test_command_config_error_exit_code(tmp_path, run_config):
    run_config['sampling'] = {'penalty_c': 3}
    with pytest.raises(CommandError) as e:
        call_command('run', config=_config_file(tmp_path, run_config),
                     stdout=io.StringIO())
    assert e.value.returncode == 2
    assert 'sampling.penalty_c' in str(e.value)


def test_command_stage_error_exit_code(tmp_path, run_config):
    raw = str(tmp_path / 'broken' / 'ratings.tsv')
    os.makedirs(os.path.dirname(raw))
    with open(raw, 'w', encoding='utf-8') as f:
        f.write('1\tnot-an-item\n2\n')
    run_config['dataset']['raw'] = raw
    with pytest.raises(CommandError) as e:
        call_command('run', config=_config_file(tmp_path, run_config),
                     stdout=io.StringIO())
    assert e.value.returncode == 3
    assert 'stage prepare failed' in str(e.value)


def test_stage_commands(tmp_path, raw_dataset):
    prepared = str(tmp_path / 'prepared')
    model_dir = str(tmp_path / 'model')
    samples = str(tmp_path / 'samples.tsv')
    lists = str(tmp_path / 'lists')
    prompts = str(tmp_path / 'prompts')
    config = _config_file(tmp_path, {'recommender': {
        'dim': 8, 'epochs': 2, 'batch_size': 128, 'lr': 0.01}})

    def run(*args, **options):
        out = io.StringIO()
        call_command(*args, stdout=out, **options)
        return out.getvalue()

    stats = json.loads(run(
        'prepare_data', dataset='generic-tsv', raw=raw_dataset,
        out=prepared))
    assert stats['n_users'] == 50
    run('train_recommender', model='mf', config=config, split=prepared,
        out=model_dir)
    assert 'draws over' in run(
        'sample_users', strategy='random', n=10, split=prepared,
        out=samples)
    built = run(
        'build_lists', split=prepared, samples=samples,
        model=os.path.join(model_dir, 'model.bin'), dataset='generic-tsv',
        n=8, n_pos=2, out=lists)
    assert '50 inference lists' in built
    assert '50 infer prompts' in run(
        'gen_prompts', kind='listwise', lists=os.path.join(
            lists, 'infer_lists.jsonl'), prepared=prepared,
        dataset='generic-tsv', out=prompts)
    assert '50 ok, 0 failed' in run(
        'complete', prompts=os.path.join(prompts, 'prompts.jsonl'),
        backend='mock-echo-hint', out=str(tmp_path / 'completions.jsonl'))
    with pytest.raises(CommandError) as e:
        run('sample_users', strategy='random', penalty_c=2.0,
            split=prepared, out=samples)
    assert e.value.returncode == 2
