from recrank.dataset import DatasetSplit
from recrank.recommenders.base import (
    EmbeddingModel, EmbeddingNet, TrainConfig, train_model)


class MFNet(EmbeddingNet):
    """ Plain factorization: the final representation is the ego table """
    tag = 'mf'


def train_mf(split: DatasetSplit, cfg: TrainConfig) -> EmbeddingModel:
    return train_model(MFNet, split, cfg)
