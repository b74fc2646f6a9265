import torch

from recrank.dataset import DatasetSplit
from recrank.exceptions import TrainingError
from recrank.recommenders.base import (
    DTYPE, EmbeddingModel, EmbeddingNet, InteractionIndex, TrainConfig,
    train_model)


def normalized_adjacency(users: torch.Tensor, items: torch.Tensor,
                         n_users: int, n_items: int) -> torch.Tensor:
    """
    D^-1/2 A D^-1/2 of the bipartite graph, users first then items, as a
    coalesced sparse tensor.
    """
    rows = torch.cat([users, items + n_users])
    cols = torch.cat([items + n_users, users])
    size = n_users + n_items
    degree = torch.bincount(rows, minlength=size).to(DTYPE)
    isolated = (degree == 0).nonzero().flatten()
    if len(isolated):
        raise TrainingError(
            f'{len(isolated)} isolated nodes in the interaction graph, '
            f'first index {int(isolated[0])}')
    inv_sqrt = degree.pow(-0.5)
    values = inv_sqrt[rows] * inv_sqrt[cols]
    return torch.sparse_coo_tensor(
        torch.stack([rows, cols]), values, (size, size)).coalesce()


def propagate(adjacency: torch.Tensor, ego: torch.Tensor,
              layers: int) -> torch.Tensor:
    embeddings = [ego]
    x = ego
    for _ in range(layers):
        x = torch.sparse.mm(adjacency, x)
        embeddings.append(x)
    return torch.stack(embeddings).mean(dim=0)


class LightGCNNet(EmbeddingNet):
    tag = 'lightgcn'

    def __init__(self, n_users, n_items, cfg, generator, adjacency=None):
        super().__init__(n_users, n_items, cfg, generator)
        self.adjacency = adjacency

    def forward(self, perturbed: bool = False):
        return self.split(
            propagate(self.adjacency, self.ego(), self.cfg.layers))


def graph_for(split: DatasetSplit) -> torch.Tensor:
    index = InteractionIndex(split)
    return normalized_adjacency(
        index.users, index.items, index.n_users, index.n_items)


def train_lightgcn(split: DatasetSplit, cfg: TrainConfig) -> EmbeddingModel:
    return train_model(LightGCNNet, split, cfg, adjacency=graph_for(split))
