import logging
from dataclasses import asdict, dataclass, field, fields

from recrank.exceptions import GatewayError
from recrank.prompts import PromptInstance
from recrank.utils import config_hash, sha256_text

logger = logging.getLogger(__name__)

HTTP_CHAT = 'http-chat'
MOCK_ECHO_HINT = 'mock-echo-hint'
MOCK_ORACLE = 'mock-oracle'
MOCK_SCRIPTED = 'mock-scripted'
MOCK_NOISY = 'mock-noisy'
BACKEND_KINDS = (
    HTTP_CHAT, MOCK_ECHO_HINT, MOCK_ORACLE, MOCK_SCRIPTED, MOCK_NOISY)

OK = 'ok'
FAILED = 'failed'


def _known(cls, section: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in section.items() if k in names}


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.1
    top_k: int = 40
    top_p: float = 0.1
    max_tokens: int = 256

    @classmethod
    def from_dict(cls, section: dict) -> 'GenerationParams':
        return cls(**_known(cls, section))

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.as_dict())

    def errors(self) -> list[tuple[str, str]]:
        result = []
        if self.temperature < 0:
            result.append(('temperature', 'must be >= 0'))
        if not 0 < self.top_p <= 1:
            result.append(('top_p', 'must lie in (0, 1]'))
        if self.top_k < 1:
            result.append(('top_k', 'must be >= 1'))
        if self.max_tokens < 1:
            result.append(('max_tokens', 'must be >= 1'))
        return result


@dataclass
class BackendConfig:
    kind: str = MOCK_ECHO_HINT
    endpoint: str | None = None
    model: str | None = None
    token_env: str = 'RECRANK_API_TOKEN'
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    concurrency: int = 8
    supports_top_k: bool = True
    replay: str | None = None
    # prompt hash -> completion, for mock-scripted
    script: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def from_dict(cls, section: dict) -> 'BackendConfig':
        return cls(**_known(cls, section))

    @property
    def backend_id(self) -> str:
        if self.kind == HTTP_CHAT:
            return f'{self.kind}:{self.model}@{self.endpoint}'
        if self.kind == MOCK_SCRIPTED:
            return f'{self.kind}:{config_hash(self.script)[:12]}'
        if self.kind == MOCK_NOISY:
            return f'{self.kind}:{self.seed}'
        return self.kind

    @property
    def is_mock(self) -> bool:
        return self.kind != HTTP_CHAT

    def errors(self) -> list[tuple[str, str]]:
        result = []
        if self.kind not in BACKEND_KINDS:
            result.append(('kind', f'unknown backend {self.kind!r}'))
        if self.kind == HTTP_CHAT:
            if not self.endpoint:
                result.append(('endpoint', 'required for http-chat'))
            if not self.model:
                result.append(('model', 'required for http-chat'))
        if self.max_retries < 0:
            result.append(('max_retries', 'must be >= 0'))
        if self.concurrency < 1:
            result.append(('concurrency', 'must be >= 1'))
        if not self.timeout > 0:
            result.append(('timeout', 'must be > 0'))
        if self.backoff < 0:
            result.append(('backoff', 'must be >= 0'))
        return result


@dataclass
class GroundTruth:
    """ What the oracle-style mocks are allowed to know """
    test_items: dict = field(default_factory=dict)
    # user -> item -> rating on the 1..5 scale
    ratings: dict = field(default_factory=dict)

    def truth(self, user_id) -> str | None:
        return self.test_items.get(user_id)

    def rating(self, user_id, item_id) -> float | None:
        return self.ratings.get(user_id, {}).get(item_id)


def prompt_hash(prompt: PromptInstance) -> str:
    return sha256_text(prompt.text)


@dataclass
class Transcript:
    prompt_hash: str
    params_hash: str
    backend_id: str
    request: dict
    response: str | None
    latency_ms: float
    attempts: int
    status: str = OK
    error: str | None = None

    @property
    def key(self) -> tuple:
        return self.prompt_hash, self.params_hash, self.backend_id

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> 'Transcript':
        return cls(**_known(cls, record))


@dataclass
class CompletionResult:
    prompt: PromptInstance
    text: str | None
    transcript: Transcript | None = None
    error: str | None = None
    cached: bool = False

    @property
    def ok(self) -> bool:
        return self.error is None and self.text is not None


class AbstractBackend:
    """
    A completion source. Subclasses implement ``complete_text`` and
    return the assistant text plus the number of attempts it took;
    failures raise ``CompletionFailed``.
    """

    def __init__(self, config: BackendConfig,
                 truth: GroundTruth | None = None):
        self.config = config
        self.truth = truth or GroundTruth()

    def __repr__(self):
        return f'{self.__class__.__name__}({self.backend_id})'

    @property
    def backend_id(self) -> str:
        return self.config.backend_id

    def request_body(self, prompt: PromptInstance,
                     params: GenerationParams) -> dict:
        body = {
            'model': self.config.model,
            'messages': [{'role': 'user', 'content': prompt.text}],
            'temperature': params.temperature,
            'top_p': params.top_p,
            'max_tokens': params.max_tokens,
        }
        if self.config.supports_top_k:
            body['top_k'] = params.top_k
        return body

    async def complete_text(self, prompt: PromptInstance,
                            params: GenerationParams) -> tuple[str, int]:
        raise NotImplementedError()

    async def close(self):
        pass


def get_backend(config: BackendConfig,
                truth: GroundTruth | None = None, **kwargs) -> AbstractBackend:
    # pylint: disable=import-outside-toplevel
    from recrank.gateway.http import HttpChatBackend
    from recrank.gateway.mocks import MOCKS

    if config.kind == HTTP_CHAT:
        return HttpChatBackend(config, truth, **kwargs)
    try:
        return MOCKS[config.kind](config, truth)
    except KeyError:
        raise GatewayError(f'unknown backend {config.kind!r}') from None
