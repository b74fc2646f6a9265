from recrank.management.base import RecRankCommand
from recrank.pipeline import STAGES, run_pipeline


class Command(RecRankCommand):
    help = 'Run the whole pipeline, reusing cached stages'

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--until', choices=STAGES, default=None,
                            help='Stop after this stage')
        parser.add_argument('--out', default=None,
                            help='Copy report and manifest here')

    def handle(self, *args, **options):
        manifest, report = run_pipeline(
            self.load_config(options), options['until'], options['out'])
        if report is not None:
            self.stdout.write(report.table)
        self.stdout.write(
            f'run {manifest.config_hash[:12]}: executed '
            f'{", ".join(manifest.executed()) or "nothing"}')
