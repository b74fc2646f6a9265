import os

from recrank.dataset import FORMATS, DatasetSplit, get_format
from recrank.management.base import RecRankCommand
from recrank.ranklist import (
    build_infer_lists, build_train_lists, write_lists)
from recrank.recommenders import load_model
from recrank.sampling import SampledUserSet


class Command(RecRankCommand):
    help = 'Build train lists for sampled users and inference lists'

    def add_arguments(self, parser):
        parser.add_argument('--split', required=True)
        parser.add_argument('--model', required=True,
                            help='model.bin written by train_recommender')
        parser.add_argument('--samples', default=None,
                            help='Draws written by sample_users')
        parser.add_argument('--dataset', choices=list(FORMATS),
                            default='ml-100k')
        parser.add_argument('--n', type=int, default=10)
        parser.add_argument('--n-pos', type=int, default=3)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        split = DatasetSplit.read(options['split'])
        model = load_model(options['model'])
        out = options['out']
        os.makedirs(out, exist_ok=True)
        if options['samples']:
            draws = SampledUserSet.read(options['samples']).draws
            train_lists = build_train_lists(
                draws, split, options['n'], options['n_pos'],
                options['seed'], get_format(options['dataset']).scale, model)
            write_lists(os.path.join(out, 'train_lists.jsonl'), train_lists)
            self.stdout.write(f'{len(train_lists)} train lists')
        users = [u for u in split.test_users if u in model.user_index]
        infer_lists = build_infer_lists(users, model, split, options['n'])
        write_lists(os.path.join(out, 'infer_lists.jsonl'), infer_lists)
        self.stdout.write(f'{len(infer_lists)} inference lists')
