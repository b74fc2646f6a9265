import os
import sys

from django.conf import ENVIRONMENT_VARIABLE
from django.core.management import execute_from_command_line


def run(argv=None):
    """ ``recrank <command> ...``: the management commands of the app """
    os.environ.setdefault(ENVIRONMENT_VARIABLE, 'recrank.settings')
    execute_from_command_line(argv or sys.argv)
