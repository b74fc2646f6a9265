import os

from recrank.dataset import DatasetSplit
from recrank.management.base import RecRankCommand
from recrank.recommenders import (
    MODEL_TAGS, TrainConfig, save_model, train_recommender,
    write_embedding_export)
from recrank.utils import write_json


class Command(RecRankCommand):
    help = 'Train an initial recommender on a prepared split'

    def add_arguments(self, parser):
        parser.add_argument('--model', choices=MODEL_TAGS, default=None)
        self.add_config_argument(parser)
        parser.add_argument('--split', required=True,
                            help='Folder written by prepare_data')
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        config = self.load_config(options)
        section = dict(config['recommender'])
        if options['model']:
            section['model'] = options['model']
        cfg = TrainConfig.from_dict(section, config['seed'])
        self.check('recommender', cfg.errors())

        model = train_recommender(DatasetSplit.read(options['split']), cfg)
        out = options['out']
        os.makedirs(out, exist_ok=True)
        save_model(model, os.path.join(out, 'model.bin'))
        write_embedding_export(model, os.path.join(out, 'user_embeddings.tsv'))
        write_json(os.path.join(out, 'history.json'), model.history)
        self.stdout.write(f'{model!r} written to {out}')
