from django.dispatch import Signal

stage_started = Signal()
stage_finished = Signal()
stage_skipped = Signal()
stage_failed = Signal()
request_finished = Signal()
request_failed = Signal()
