import json

from django.core.management.base import CommandError

from recrank.management.base import CONFIG_ERROR, RecRankCommand
from recrank.pipeline import sweep


def parse_vary(text: str) -> tuple[str, list]:
    """
    ``key=v1,v2`` or ``key=<json list>``; every value is read as JSON
    when it parses and kept as a string otherwise.
    """
    key, sep, values = text.partition('=')
    if not sep or not key or not values:
        raise CommandError(
            f'--vary expects key=v1,v2,..., got {text!r}',
            returncode=CONFIG_ERROR)
    try:
        parsed = json.loads(values)
    except ValueError:
        parsed = None
    if isinstance(parsed, list):
        return key, parsed
    result = []
    for value in values.split(','):
        try:
            result.append(json.loads(value))
        except ValueError:
            result.append(value)
    return key, result


class Command(RecRankCommand):
    help = 'Run the pipeline once per value of one config key'

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--vary', required=True,
                            help='Dotted key and values: key=v1,v2,...')

    def handle(self, *args, **options):
        key, values = parse_vary(options['vary'])
        for value, (manifest, report) in zip(
                values, sweep(self.load_config(options), key, values)):
            self.stdout.write(
                f'{key}={value!r} run {manifest.config_hash[:12]}')
            if report is not None:
                self.stdout.write(report.table)
