import json

from django.core.management.base import BaseCommand, CommandError

from recrank.conf import get_config, load_config_file
from recrank.exceptions import ConfigValidationError, RecRankError
from recrank.pipeline import Diagnostic

CONFIG_ERROR = 2
STAGE_ERROR = 3


class RecRankCommand(BaseCommand):
    """
    Package errors leave with distinct exit codes: invalid configuration
    exits with 2, any other failure with 3.
    """

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except ConfigValidationError as e:
            raise CommandError(str(e), returncode=CONFIG_ERROR) from e
        except RecRankError as e:
            raise CommandError(str(e), returncode=STAGE_ERROR) from e

    def add_config_argument(self, parser):
        self.add_base_argument(
            parser,
            '--config',
            help='JSON run config layered over settings.RECRANK',
        )

    @staticmethod
    def load_config(options) -> dict:
        path = options.get('config')
        return get_config(load_config_file(path) if path else None)

    @staticmethod
    def check(section: str, errors):
        diagnostics = [
            Diagnostic(f'{section}.{key}', message)
            for key, message in errors]
        if diagnostics:
            raise ConfigValidationError(diagnostics)

    def write_json(self, data):
        self.stdout.write(json.dumps(data, indent=2, sort_keys=True))
