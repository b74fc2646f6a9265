from recrank.gateway.base import (
    BACKEND_KINDS, AbstractBackend, BackendConfig, CompletionResult,
    GenerationParams, GroundTruth, Transcript, get_backend, prompt_hash)
from recrank.gateway.batch import batch_complete, complete, run_batch
from recrank.gateway.transcript import TranscriptLog

__all__ = [
    'BACKEND_KINDS', 'AbstractBackend', 'BackendConfig', 'CompletionResult',
    'GenerationParams', 'GroundTruth', 'Transcript', 'TranscriptLog',
    'batch_complete', 'complete', 'get_backend', 'prompt_hash', 'run_batch',
]
