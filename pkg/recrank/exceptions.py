class RecRankError(Exception):
    pass


class DatasetError(RecRankError):
    pass


class MalformedRowsError(DatasetError):
    def __init__(self, path: str, diagnostics: list[str], threshold: int):
        self.path = path
        self.diagnostics = diagnostics
        self.threshold = threshold
        shown = '\n'.join(diagnostics[:20])
        super().__init__(
            f'{path}: {len(diagnostics)} malformed rows '
            f'(threshold {threshold})\n{shown}')


class TimestampError(DatasetError):
    pass


class SamplingError(RecRankError):
    pass


class TrainingError(RecRankError):
    pass


class UnknownUserError(RecRankError, KeyError):
    def __init__(self, user_id):
        self.user_id = user_id
        super().__init__(f'unknown user {user_id!r}')

    def __str__(self):
        return self.args[0]


class RankListError(RecRankError):
    pass


class PromptError(RecRankError):
    pass


class MissingTitleError(PromptError):
    def __init__(self, item_id):
        self.item_id = item_id
        super().__init__(f'no title for item {item_id!r}')


class PromptBudgetError(PromptError):
    def __init__(self, message, kind=None, user_id=None, payload=()):
        self.kind = kind
        self.user_id = user_id
        self.payload = list(payload)
        super().__init__(message)

    def as_dict(self) -> dict:
        return {
            'kind': self.kind, 'user_id': self.user_id,
            'payload': self.payload, 'error': str(self)}


class CorpusError(PromptError):
    pass


class GatewayError(RecRankError):
    pass


class TransientBackendError(GatewayError):
    """ Failure worth retrying: 429, 5xx, connection problems """


class CompletionFailed(GatewayError):
    def __init__(self, message: str, attempts: int = 0):
        self.attempts = attempts
        super().__init__(message)


class EvaluationError(RecRankError):
    pass


class ConfigValidationError(RecRankError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__(
            'invalid config:\n' + '\n'.join(str(d) for d in diagnostics))


class StageError(RecRankError):
    def __init__(self, stage: str, path: str, exc: BaseException):
        self.stage = stage
        self.path = path
        self.exc = exc
        super().__init__(f'stage {stage} failed ({path}): {exc}')
