import os

from recrank.dataset import FORMATS, get_format, load_prepared
from recrank.management.base import RecRankCommand
from recrank.prompts import (
    HINT_SOURCES, KINDS, PromptContext, build_prompts, emit_tuning_corpus,
    write_prompts)
from recrank.ranklist import INFER, TRAIN, read_lists


class Command(RecRankCommand):
    help = 'Render prompts for ranking lists; train phase adds the corpus'

    def add_arguments(self, parser):
        parser.add_argument(
            '--kind', default='all',
            choices=[k.replace('_', '-') for k in KINDS] + ['all'])
        parser.add_argument('--phase', choices=(TRAIN, INFER),
                            default=INFER)
        parser.add_argument('--lists', required=True)
        parser.add_argument('--prepared', required=True,
                            help='Folder written by prepare_data')
        parser.add_argument('--dataset', choices=list(FORMATS),
                            default='ml-100k')
        parser.add_argument('--hint-source', choices=HINT_SOURCES,
                            default='model')
        self.add_config_argument(parser)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        config = self.load_config(options)
        kinds = (list(KINDS) if options['kind'] == 'all'
                 else [options['kind'].replace('-', '_')])
        prepared = load_prepared(options['prepared'])
        dataset_format = get_format(options['dataset'])
        ctx = PromptContext(
            prepared.split, prepared.catalog, dataset_format.scale,
            dataset_format.domain, options['seed'],
            dict(config['prompts'], hint_source=options['hint_source']))
        lists = [r for r in read_lists(options['lists'])
                 if r.phase == options['phase']]
        over_budget = []
        instances = build_prompts(lists, kinds, ctx, over_budget)
        out = options['out']
        os.makedirs(out, exist_ok=True)
        write_prompts(os.path.join(out, 'prompts.jsonl'), instances)
        self.stdout.write(
            f'{len(instances)} {options["phase"]} prompts, '
            f'{len(over_budget)} dropped over the context budget')
        if options['phase'] == TRAIN:
            self.write_json(emit_tuning_corpus(
                instances, config['prompts']['mix'], options['seed'],
                os.path.join(out, 'corpus')))
