from recrank.dataset import DatasetSplit
from recrank.management.base import RecRankCommand
from recrank.sampling import (
    CLUSTERINGS, STRATEGIES, SamplingPlan, UserEmbeddingTable, sample_users)


class Command(RecRankCommand):
    help = 'Draw the users whose lists feed the tuning corpus'

    def add_arguments(self, parser):
        parser.add_argument('--strategy', choices=STRATEGIES,
                            default='composite')
        parser.add_argument('--clustering', choices=CLUSTERINGS,
                            default='kmeans')
        parser.add_argument('--n', type=int, default=100)
        parser.add_argument('--penalty-c', type=float, default=0.9)
        parser.add_argument('--k', type=int, default=10)
        parser.add_argument('--eps', type=float, default=0.5)
        parser.add_argument('--min-pts', type=int, default=5)
        parser.add_argument('--embeddings', default=None,
                            help='TSV of user_id and comma separated vector')
        parser.add_argument('--split', required=True,
                            help='Folder written by prepare_data')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', required=True)

    def handle(self, *args, **options):
        plan = SamplingPlan(
            strategy=options['strategy'], n_samples=options['n'],
            penalty_c=options['penalty_c'], k=options['k'],
            eps=options['eps'], min_pts=options['min_pts'],
            clustering=options['clustering'], seed=options['seed'],
            embeddings=options['embeddings'])
        self.check('sampling', plan.errors())
        split = DatasetSplit.read(options['split'])
        counts = {
            str(u): int(c)
            for u, c in split.train['user_id'].value_counts().items()}
        emb = None
        if plan.uses_clustering:
            emb = UserEmbeddingTable.read(plan.embeddings)
        sampled = sample_users(plan, counts, emb)
        sampled.write(options['out'])
        self.stdout.write(
            f'{len(sampled)} draws over {len(sampled.multiplicity)} users')
