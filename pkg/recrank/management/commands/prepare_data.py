from recrank.dataset import prepare_dataset
from recrank.management.base import RecRankCommand


class Command(RecRankCommand):
    help = 'Load a raw dataset, k-core filter it and split leave-last-out'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', required=True, help='Format tag')
        parser.add_argument('--raw', required=True, help='Raw file or folder')
        parser.add_argument('--k-core', type=int, default=None)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--malformed-threshold', type=int, default=0)
        parser.add_argument(
            '--force-timestamps', action='store_true',
            help='Replace real timestamps with simulated ones')
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        prepared = prepare_dataset(
            options['dataset'], options['raw'], options['out'],
            options['k_core'], options['seed'],
            options['malformed_threshold'], options['force_timestamps'])
        self.write_json(prepared.stats.as_dict())
