"""
LightGCN propagation with uniform noise added after every layer while
training, plus an InfoNCE term tying the final view to one layer's view.
"""
import torch
import torch.nn.functional as F

from recrank.dataset import DatasetSplit
from recrank.recommenders.base import EmbeddingModel, TrainConfig, train_model
from recrank.recommenders.lightgcn import LightGCNNet, graph_for


def info_nce(x1: torch.Tensor, x2: torch.Tensor,
             temperature: float) -> torch.Tensor:
    """ Row i of x1 and x2 are the positive pair, other rows negatives """
    x1, x2 = F.normalize(x1, dim=-1), F.normalize(x2, dim=-1)
    logits = x1 @ x2.T / temperature
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def perturb(x: torch.Tensor, eps: float,
            generator: torch.Generator) -> torch.Tensor:
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype)
    return x + torch.sign(x) * F.normalize(noise, dim=-1) * eps


class XSimGCLNet(LightGCNNet):
    tag = 'xsimgcl'

    def views(self, noise: torch.Generator | None):
        """ (final users, final items, contrast users, contrast items) """
        x = self.ego()
        embeddings, contrast = [x], x
        for layer in range(self.cfg.layers):
            x = torch.sparse.mm(self.adjacency, x)
            if noise is not None and self.cfg.eps:
                x = perturb(x, self.cfg.eps, noise)
            embeddings.append(x)
            if layer == self.cfg.contrast_layer - 1:
                contrast = x
        final = torch.stack(embeddings).mean(dim=0)
        return (*self.split(final), *self.split(contrast))

    def loss(self, users, pos, neg, noise=None):
        user_final, item_final, user_cl, item_cl = self.views(noise)
        parts = self.ranking_loss(users, pos, neg, user_final, item_final)
        if self.cfg.cl_weight:
            batch_users = torch.unique(users)
            batch_items = torch.unique(pos)
            parts['cl'] = self.cfg.cl_weight * (
                info_nce(user_final[batch_users], user_cl[batch_users],
                         self.cfg.temperature)
                + info_nce(item_final[batch_items], item_cl[batch_items],
                           self.cfg.temperature))
        return parts


def train_xsimgcl(split: DatasetSplit, cfg: TrainConfig) -> EmbeddingModel:
    return train_model(XSimGCLNet, split, cfg, adjacency=graph_for(split))
