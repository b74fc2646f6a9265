from recrank.exceptions import TrainingError
from recrank.recommenders.base import (
    MODEL_TAGS, EmbeddingModel, TrainConfig, export_user_embeddings,
    load_model, predict_scores, save_model, top_k_unseen,
    write_embedding_export)
from recrank.recommenders.lightgcn import train_lightgcn
from recrank.recommenders.mf import train_mf
from recrank.recommenders.xsimgcl import train_xsimgcl

TRAINERS = {
    'mf': train_mf,
    'lightgcn': train_lightgcn,
    'xsimgcl': train_xsimgcl,
}


def train_recommender(split, cfg: TrainConfig) -> EmbeddingModel:
    try:
        trainer = TRAINERS[cfg.model]
    except KeyError:
        raise TrainingError(f'unknown model {cfg.model!r}') from None
    return trainer(split, cfg)


__all__ = [
    'MODEL_TAGS', 'TRAINERS', 'EmbeddingModel', 'TrainConfig',
    'export_user_embeddings', 'load_model', 'predict_scores', 'save_model',
    'top_k_unseen', 'train_recommender', 'write_embedding_export',
    'train_mf', 'train_lightgcn', 'train_xsimgcl',
]
