import glob
import os

from recrank.dataset import DatasetSplit
from recrank.evaluation import aggregate_report
from recrank.hybrid import read_rankings
from recrank.management.base import RecRankCommand


class Command(RecRankCommand):
    help = 'Score final rankings against the held-out items'

    def add_arguments(self, parser):
        parser.add_argument('--rankings', required=True,
                            help='Folder with one <method>.jsonl per method')
        parser.add_argument('--truth', required=True,
                            help='Split folder holding test.tsv')
        parser.add_argument('--alpha', type=float, default=0.05)
        parser.add_argument('--ks', type=int, nargs='+', default=[3, 5])
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        paths = sorted(glob.glob(os.path.join(options['rankings'], '*.jsonl')))
        rankings = {
            os.path.splitext(os.path.basename(p))[0]: read_rankings(p)
            for p in paths}
        split = DatasetSplit.read(options['truth'])
        report = aggregate_report(
            rankings, split.per_user_test_item, options['ks'],
            options['alpha'])
        report.write(options['out'])
        self.stdout.write(report.table)
