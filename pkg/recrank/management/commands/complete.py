from recrank.dataset import FORMATS, get_format, load_prepared
from recrank.gateway import (
    BACKEND_KINDS, BackendConfig, GenerationParams, GroundTruth,
    TranscriptLog, get_backend, prompt_hash, run_batch)
from recrank.management.base import RecRankCommand
from recrank.prompts import PromptContext, read_prompts
from recrank.utils import write_jsonl


class Command(RecRankCommand):
    help = 'Send prompts to a completion backend'

    def add_arguments(self, parser):
        parser.add_argument('--prompts', required=True)
        parser.add_argument('--backend', choices=BACKEND_KINDS, default=None)
        parser.add_argument('--endpoint', default=None)
        parser.add_argument('--model', default=None)
        parser.add_argument('--concurrency', type=int, default=None)
        parser.add_argument('--replay', default=None,
                            help='Answer only from this transcript log')
        parser.add_argument('--transcripts', default=None,
                            help='Transcript log to append to')
        parser.add_argument('--prepared', default=None,
                            help='Prepared dataset, needed by oracle mocks')
        parser.add_argument('--dataset', choices=list(FORMATS),
                            default='ml-100k')
        self.add_config_argument(parser)
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        config = self.load_config(options)
        section = dict(config['backend'])
        for name, key in (('backend', 'kind'), ('endpoint', 'endpoint'),
                          ('model', 'model'),
                          ('concurrency', 'concurrency'),
                          ('replay', 'replay')):
            if options[name] is not None:
                section[key] = options[name]
        backend_config = BackendConfig.from_dict(section)
        params = GenerationParams.from_dict(config['generation'])
        self.check('backend', backend_config.errors())
        self.check('generation', params.errors())

        truth = None
        if options['prepared']:
            prepared = load_prepared(options['prepared'])
            ctx = PromptContext(
                prepared.split, prepared.catalog,
                get_format(options['dataset']).scale)
            truth = GroundTruth(
                dict(prepared.split.per_user_test_item), ctx.ratings)
        prompts = read_prompts(options['prompts'])
        log = TranscriptLog(options['transcripts'], backend_config.replay)
        results = run_batch(
            prompts, params, get_backend(backend_config, truth), log)
        write_jsonl(options['out'], ({
            'prompt_hash': prompt_hash(r.prompt),
            'user_id': r.prompt.user_id,
            'kind': r.prompt.kind,
            'payload': r.prompt.payload,
            'text': r.text,
            'error': r.error,
        } for r in results))
        failed = sum(not r.ok for r in results)
        self.stdout.write(f'{len(results) - failed} ok, {failed} failed')
