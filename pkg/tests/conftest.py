import os

import django
from django.conf import ENVIRONMENT_VARIABLE

import pytest

from tests import settings
from tests import utils


def _capture(signal):
    signal_calls = []

    def receiver(**kwargs):
        signal_calls.append(kwargs)

    signal.connect(receiver)
    return signal_calls, receiver


@pytest.fixture(name="stage_signals")
def stage_signals_fixture():
    # pylint: disable=import-outside-toplevel
    from recrank import signals

    captured = {}
    connected = []
    for name in ('stage_started', 'stage_finished', 'stage_skipped',
                 'stage_failed'):
        signal = getattr(signals, name)
        captured[name], receiver = _capture(signal)
        connected.append((signal, receiver))
    try:
        yield captured
    finally:
        for signal, receiver in connected:
            signal.disconnect(receiver)


@pytest.fixture(name="request_signals")
def request_signals_fixture():
    # pylint: disable=import-outside-toplevel
    from recrank import signals

    finished, on_finished = _capture(signals.request_finished)
    failed, on_failed = _capture(signals.request_failed)
    try:
        yield {'finished': finished, 'failed': failed}
    finally:
        signals.request_finished.disconnect(on_finished)
        signals.request_failed.disconnect(on_failed)


@pytest.fixture(name="raw_dataset")
def raw_dataset_fixture(tmp_path):
    return utils.write_generic_dataset(str(tmp_path / 'raw'))


@pytest.fixture(name="run_config")
def run_config_fixture(tmp_path, raw_dataset):
    return utils.pipeline_config(str(tmp_path / 'work'), raw_dataset)


@pytest.hookimpl(trylast=True)
def pytest_sessionstart():
    os.environ[ENVIRONMENT_VARIABLE] = settings.__name__
    django.setup()
