from django.apps import AppConfig

__version__ = '0.1'


class RecRankConfig(AppConfig):
    name = 'recrank'
    label = 'recrank'
    verbose_name = 'LLM reranking evaluation'

    def ready(self):
        # pylint: disable=import-outside-toplevel
        from recrank import pipeline

        pipeline.connect_log_receivers()
