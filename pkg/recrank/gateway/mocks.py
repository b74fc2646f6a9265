"""
Deterministic local backends. Each answer is a pure function of the
prompt and the ground truth handed to the backend.
"""
from recrank.exceptions import CompletionFailed
from recrank.gateway.base import (
    MOCK_ECHO_HINT, MOCK_NOISY, MOCK_ORACLE, MOCK_SCRIPTED, AbstractBackend,
    prompt_hash)
from recrank.prompts import (
    LISTWISE, NO, PAIRWISE, YES, PromptInstance, format_score, numbered)
from recrank.utils import derive_rng

NEUTRAL_SCORE = '3.0'


class MockBackend(AbstractBackend):

    def answer(self, prompt: PromptInstance) -> str:
        if prompt.kind == LISTWISE:
            return self.listwise(prompt)
        if prompt.kind == PAIRWISE:
            return self.pairwise(prompt)
        return self.pointwise(prompt)

    async def complete_text(self, prompt, params):
        return self.answer(prompt), 1

    def listwise(self, prompt: PromptInstance) -> str:
        return numbered(prompt.meta['hint_titles'], sep='\n')

    def pointwise(self, prompt: PromptInstance) -> str:
        return prompt.hint if prompt.hint is not None else NEUTRAL_SCORE

    def pairwise(self, prompt: PromptInstance) -> str:
        return YES if prompt.meta['hint_winner'] == prompt.payload[0] else NO


class EchoHintBackend(MockBackend):
    """ Repeats whatever the initial model suggested """


class OracleBackend(MockBackend):
    """ Knows the held-out item; falls back to the hint elsewhere """

    def listwise(self, prompt):
        truth = self.truth.truth(prompt.user_id)
        order = prompt.meta['hint_order']
        titles = dict(zip(order, prompt.meta['hint_titles']))
        if truth in titles:
            order = [truth] + [i for i in order if i != truth]
        return numbered((titles[i] for i in order), sep='\n')

    def pointwise(self, prompt):
        truth = self.truth.truth(prompt.user_id)
        return '5.0' if prompt.payload[0] == truth else '1.0'

    def pairwise(self, prompt):
        truth = self.truth.truth(prompt.user_id)
        item_a, item_b = prompt.payload
        if truth in (item_a, item_b):
            return YES if truth == item_a else NO
        return super().pairwise(prompt)


class ScriptedBackend(MockBackend):

    async def complete_text(self, prompt, params):
        key = prompt_hash(prompt)
        try:
            return self.config.script[key], 1
        except KeyError:
            raise CompletionFailed(
                f'no scripted completion for prompt {key[:12]}', 1) from None


class NoisyBackend(MockBackend):
    """
    Copies a pointwise hint when it equals the user's true rating and
    answers at random otherwise, which is how a model that learned to
    trust leaked hints behaves.
    """

    def rng(self, prompt):
        return derive_rng(self.config.seed, 'noisy', prompt_hash(prompt))

    def pointwise(self, prompt):
        rating = self.truth.rating(prompt.user_id, prompt.payload[0])
        if prompt.hint is not None and rating is not None \
                and prompt.hint == format_score(rating):
            return prompt.hint
        return format_score(self.rng(prompt).uniform(1.0, 5.0))

    def listwise(self, prompt):
        titles = prompt.meta['hint_titles']
        order = self.rng(prompt).permutation(len(titles))
        return numbered((titles[i] for i in order), sep='\n')

    def pairwise(self, prompt):
        return YES if self.rng(prompt).random() < 0.5 else NO


MOCKS = {
    MOCK_ECHO_HINT: EchoHintBackend,
    MOCK_ORACLE: OracleBackend,
    MOCK_SCRIPTED: ScriptedBackend,
    MOCK_NOISY: NoisyBackend,
}
