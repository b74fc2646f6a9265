"""
Shared pieces of the initial recommenders: training configuration, the
frozen ``EmbeddingModel`` used for scoring and its binary artifact, and
the BPR training loop every model runs through.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from django.utils.functional import cached_property
from torch import nn

from recrank.dataset import DatasetSplit
from recrank.exceptions import (
    RankListError, TrainingError, UnknownUserError)
from recrank.sampling import UserEmbeddingTable
from recrank.utils import atomic_write_text, config_hash, id_sort_key

logger = logging.getLogger(__name__)

MODEL_TAGS = ('mf', 'lightgcn', 'xsimgcl')
MAGIC = b'RRKM'
FORMAT_VERSION = 1
# magic, u16 version, u32 header length; header is utf-8 JSON
HEADER = struct.Struct('<4sHI')
DTYPE = torch.float64
INIT_STD = 0.1


@dataclass
class TrainConfig:
    model: str = 'mf'
    dim: int = 64
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 2048
    negatives: int = 1
    layers: int = 3
    eps: float = 0.1
    cl_weight: float = 0.2
    temperature: float = 0.2
    contrast_layer: int = 1
    reg: float = 1e-4
    seed: int = 0

    @classmethod
    def from_dict(cls, section: dict, seed: int = 0) -> 'TrainConfig':
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in section.items() if k in names}
        values.setdefault('seed', seed)
        return cls(**values)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def errors(self) -> list[tuple[str, str]]:
        result = []
        if self.model not in MODEL_TAGS:
            result.append(('model', f'unknown model {self.model!r}'))
        for name in ('dim', 'batch_size', 'negatives'):
            if getattr(self, name) < 1:
                result.append((name, 'must be >= 1'))
        if self.epochs < 0:
            result.append(('epochs', 'must be >= 0'))
        if not self.lr > 0:
            result.append(('lr', 'must be > 0'))
        if not self.temperature > 0:
            result.append(('temperature', 'must be > 0'))
        for name in ('eps', 'cl_weight', 'reg'):
            if getattr(self, name) < 0:
                result.append((name, 'must be >= 0'))
        if self.model in ('lightgcn', 'xsimgcl') and self.layers < 0:
            result.append(('layers', 'must be >= 0'))
        if self.model == 'xsimgcl' and not (
                1 <= self.contrast_layer <= max(self.layers, 1)):
            result.append(('contrast_layer', 'must lie in 1..layers'))
        return result


@dataclass
class EmbeddingModel:
    """
    Frozen final representations; f(u, i) is the dot product of the
    user and item rows.
    """
    tag: str
    user_ids: list
    item_ids: list
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.user_vectors = np.ascontiguousarray(self.user_vectors, float)
        self.item_vectors = np.ascontiguousarray(self.item_vectors, float)
        if not (np.isfinite(self.user_vectors).all()
                and np.isfinite(self.item_vectors).all()):
            raise TrainingError(f'{self.tag}: non-finite embeddings')

    def __repr__(self):
        return (f'{self.__class__.__name__}({self.tag}, '
                f'{len(self.user_ids)} users, {len(self.item_ids)} items, '
                f'd={self.dim})')

    @property
    def dim(self) -> int:
        return self.user_vectors.shape[1]

    @cached_property
    def user_index(self) -> dict:
        return {u: n for n, u in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict:
        return {i: n for n, i in enumerate(self.item_ids)}

    @cached_property
    def _tie_rank(self) -> np.ndarray:
        order = sorted(range(len(self.item_ids)),
                       key=lambda n: id_sort_key(self.item_ids[n]))
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        return rank

    def score_vector(self, user_id) -> np.ndarray:
        try:
            row = self.user_index[str(user_id)]
        except KeyError:
            raise UnknownUserError(user_id) from None
        return self.item_vectors @ self.user_vectors[row]

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def predict_scores(model: EmbeddingModel, user_id) -> dict:
    scores = model.score_vector(user_id)
    return dict(zip(model.item_ids, (float(s) for s in scores)))


def top_k_unseen(model: EmbeddingModel, user_id, k: int,
                 seen: Iterable = ()) -> list:
    """
    The k best-scored items outside ``seen``, descending; equal scores
    fall back to ascending item id.
    """
    scores = model.score_vector(user_id)
    seen = {str(i) for i in seen}
    candidates = np.array(
        [n for n, item in enumerate(model.item_ids) if item not in seen],
        dtype=np.int64)
    if k > len(candidates):
        raise RankListError(
            f'user {user_id}: k={k} exceeds {len(candidates)} unseen items')
    order = np.lexsort((model._tie_rank[candidates], -scores[candidates]))
    return [model.item_ids[n] for n in candidates[order[:k]]]


def export_user_embeddings(model: EmbeddingModel) -> UserEmbeddingTable:
    return UserEmbeddingTable(model.user_ids, model.user_vectors).normalized()


def save_model(model: EmbeddingModel, path: str):
    """
    Little-endian layout: ``HEADER`` then the JSON header then the user
    and item matrices as row-major float64.
    """
    header = json.dumps({
        'model_tag': model.tag,
        'd': model.dim,
        'layers': model.config.get('layers'),
        'seed': model.config.get('seed'),
        'config_hash': model.config_hash,
        'config': model.config,
        'user_ids': model.user_ids,
        'item_ids': model.item_ids,
        'history': model.history,
    }, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(model.user_vectors.astype('<f8').tobytes())
        f.write(model.item_vectors.astype('<f8').tobytes())


def load_model(path: str) -> EmbeddingModel:
    with open(path, 'rb') as f:
        data = f.read()
    magic, version, size = HEADER.unpack_from(data)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise TrainingError(f'{path}: not a model artifact')
    offset = HEADER.size
    header = json.loads(data[offset:offset + size].decode('utf-8'))
    offset += size
    n_users, n_items, d = (
        len(header['user_ids']), len(header['item_ids']), header['d'])
    matrix = np.frombuffer(data, dtype='<f8', offset=offset)
    if matrix.size != (n_users + n_items) * d:
        raise TrainingError(f'{path}: truncated model artifact')
    return EmbeddingModel(
        header['model_tag'], header['user_ids'], header['item_ids'],
        matrix[:n_users * d].reshape(n_users, d).astype(float),
        matrix[n_users * d:].reshape(n_items, d).astype(float),
        header['config'], header['history'])


def write_embedding_export(model: EmbeddingModel, path: str):
    export_user_embeddings(model).write(path)


def bpr_loss(pos_scores: torch.Tensor,
             neg_scores: torch.Tensor) -> torch.Tensor:
    """ -ln sigmoid(pos - neg), averaged """
    return F.softplus(neg_scores - pos_scores).mean()


def l2_loss(*tensors: torch.Tensor) -> torch.Tensor:
    batch = tensors[0].shape[0]
    return sum(t.pow(2).sum() for t in tensors) / (2 * batch)


class InteractionIndex:
    """ Dense integer view of a train split """

    def __init__(self, split: DatasetSplit):
        self.user_ids = list(split.users)
        self.item_ids = sorted(set(split.train['item_id']), key=id_sort_key)
        user_index = {u: n for n, u in enumerate(self.user_ids)}
        item_index = {i: n for n, i in enumerate(self.item_ids)}
        self.users = torch.tensor(
            [user_index[u] for u in split.train['user_id']], dtype=torch.long)
        self.items = torch.tensor(
            [item_index[i] for i in split.train['item_id']], dtype=torch.long)
        self.keys = torch.unique(self.users * self.n_items + self.items)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)

    def check_negatives(self):
        counts = torch.bincount(
            torch.div(self.keys, self.n_items, rounding_mode='floor'),
            minlength=self.n_users)
        full = (counts >= self.n_items).nonzero().flatten().tolist()
        if full:
            raise TrainingError(
                f'users without unseen items: '
                f'{[self.user_ids[n] for n in full[:10]]}')

    def sample_negatives(self, users: torch.Tensor,
                         generator: torch.Generator) -> torch.Tensor:
        negatives = torch.randint(
            self.n_items, users.shape, generator=generator)
        rejected = torch.isin(users * self.n_items + negatives, self.keys)
        while rejected.any():
            redraw = torch.randint(
                self.n_items, (int(rejected.sum()),), generator=generator)
            negatives[rejected] = redraw
            rejected = torch.isin(users * self.n_items + negatives, self.keys)
        return negatives


class EmbeddingNet(nn.Module):
    """ Ego embeddings; subclasses add propagation through ``forward`` """
    tag = 'mf'

    def __init__(self, n_users: int, n_items: int, cfg: TrainConfig,
                 generator: torch.Generator):
        super().__init__()
        self.n_users = n_users
        self.n_items = n_items
        self.cfg = cfg
        self.user_weight = nn.Parameter(torch.randn(
            n_users, cfg.dim, generator=generator, dtype=DTYPE) * INIT_STD)
        self.item_weight = nn.Parameter(torch.randn(
            n_items, cfg.dim, generator=generator, dtype=DTYPE) * INIT_STD)

    def ego(self) -> torch.Tensor:
        return torch.cat([self.user_weight, self.item_weight])

    def split(self, embeddings: torch.Tensor):
        return torch.split(embeddings, [self.n_users, self.n_items])

    def forward(self, perturbed: bool = False):
        return self.user_weight, self.item_weight

    def loss(self, users, pos, neg, noise: torch.Generator | None = None):
        user_final, item_final = self.forward()
        return self.ranking_loss(users, pos, neg, user_final, item_final)

    def ranking_loss(self, users, pos, neg, user_final, item_final):
        u = user_final[users]
        pos_scores = (u * item_final[pos]).sum(dim=1)
        neg_scores = (u * item_final[neg]).sum(dim=1)
        parts = {'bpr': bpr_loss(pos_scores, neg_scores)}
        if self.cfg.reg:
            parts['reg'] = self.cfg.reg * l2_loss(
                self.user_weight[users], self.item_weight[pos],
                self.item_weight[neg])
        return parts


def train_model(net_class, split: DatasetSplit, cfg: TrainConfig,
                **net_kwargs) -> EmbeddingModel:
    """
    Adam over shuffled mini-batches of (user, positive, sampled unseen
    negative) triples. Everything random flows from ``cfg.seed``.
    """
    if split.train.empty:
        raise TrainingError('cannot train on an empty split')
    torch.set_num_threads(1)
    index = InteractionIndex(split)
    index.check_negatives()
    generator = torch.Generator().manual_seed(cfg.seed)
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    net = net_class(index.n_users, index.n_items, cfg, generator,
                    **net_kwargs)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    logger.info('training %s on %s users, %s items, %s interactions',
                net.tag, index.n_users, index.n_items, len(index))
    history = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(index), generator=generator)
        totals, batches = {}, 0
        for start in range(0, len(index), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            users = index.users[batch].repeat_interleave(cfg.negatives)
            pos = index.items[batch].repeat_interleave(cfg.negatives)
            neg = index.sample_negatives(users, generator)
            parts = net.loss(users, pos, neg, noise)
            loss = sum(parts.values())
            if not torch.isfinite(loss):
                raise TrainingError(
                    f'{net.tag}: non-finite loss at epoch {epoch}, '
                    f'batch {batches}: '
                    + ', '.join(f'{k}={v.item()}' for k, v in parts.items()))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batches += 1
            for name, value in parts.items():
                totals[name] = totals.get(name, 0.0) + value.item()
        record = {k: v / batches for k, v in sorted(totals.items())}
        record['loss'] = sum(record.values())
        record['epoch'] = epoch
        history.append(record)
        logger.debug('%s epoch %s loss %.6f', net.tag, epoch, record['loss'])
    if history and not math.isfinite(history[-1]['loss']):
        raise TrainingError(f'{net.tag}: final loss is not finite')
    with torch.no_grad():
        user_final, item_final = net.forward()
    return EmbeddingModel(
        net.tag, index.user_ids, index.item_ids,
        user_final.detach().numpy().copy(),
        item_final.detach().numpy().copy(),
        cfg.as_dict() | {'model': net.tag}, history)
