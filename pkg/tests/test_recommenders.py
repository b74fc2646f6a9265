import math

import numpy as np
import pytest
import torch

from recrank import recommenders
from recrank.dataset import prepare_dataset
from recrank.exceptions import RankListError, TrainingError, UnknownUserError
from recrank.recommenders.base import INIT_STD, EmbeddingModel, bpr_loss
from recrank.recommenders.lightgcn import (
    LightGCNNet, normalized_adjacency, propagate)
from recrank.recommenders.xsimgcl import info_nce
from tests.utils import make_model, make_split, write_generic_dataset


@pytest.fixture(name="split")
def split_fixture(tmp_path):
    raw = write_generic_dataset(str(tmp_path / 'raw'), n_users=20)
    return prepare_dataset(
        'generic-tsv', raw, str(tmp_path / 'prepared')).split


def _config(model, **kwargs):
    values = {
        'model': model, 'dim': 8, 'epochs': 5, 'batch_size': 64,
        'lr': 0.01, 'seed': 3, 'layers': 2}
    values.update(kwargs)
    return recommenders.TrainConfig(**values)


def test_bpr_gradcheck():
    pos = torch.randn(3, dtype=torch.float64, requires_grad=True)
    neg = torch.randn(3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(bpr_loss, (pos, neg))


def test_info_nce_gradcheck():
    generator = torch.Generator().manual_seed(0)
    x1 = torch.randn(3, 3, generator=generator, dtype=torch.float64,
                     requires_grad=True)
    x2 = torch.randn(3, 3, generator=generator, dtype=torch.float64,
                     requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda a, b: info_nce(a, b, 0.2), (x1, x2))


def test_info_nce_orthonormal_views():
    tau = 0.2
    x = torch.eye(3, dtype=torch.float64)
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 2))
    assert info_nce(x, x, tau).item() == pytest.approx(expected, abs=1e-12)


def test_bpr_loss_value():
    loss = bpr_loss(torch.tensor([2.0]), torch.tensor([0.0]))
    assert loss.item() == pytest.approx(-math.log(1 / (1 + math.exp(-2))))


def test_normalized_adjacency():
    adjacency = normalized_adjacency(
        torch.tensor([0, 0, 1]), torch.tensor([0, 1, 0]), 2, 2).to_dense()
    half = 1 / math.sqrt(2)
    assert np.allclose(adjacency.numpy(), [
        [0, 0, 0.5, half],
        [0, 0, half, 0],
        [0.5, half, 0, 0],
        [half, 0, 0, 0],
    ])


def test_top_k_unseen_ties_by_item_id():
    model = make_model({'1': [1.0, 0.0]}, {
        'a': [1.0, 0.0], 'b': [2.0, 0.0], 'c': [1.0, 0.0], '10': [0.0, 0.0],
        '2': [1.0, 0.0]})
    assert recommenders.top_k_unseen(model, '1', 3, seen={'b'}) == \
        ['2', 'a', 'c']
    assert recommenders.top_k_unseen(model, '1', 1) == ['b']
    with pytest.raises(RankListError):
        recommenders.top_k_unseen(model, '1', 5, seen={'b'})
    with pytest.raises(UnknownUserError):
        recommenders.top_k_unseen(model, '7', 1)


def test_predict_scores():
    model = make_model(
        {'1': [1.0, 2.0]}, {'a': [3.0, 0.5], 'b': [-1.0, 1.0]})
    assert recommenders.predict_scores(model, 1) == {'a': 4.0, 'b': 1.0}


def test_export_is_unit_norm():
    model = make_model(
        {'1': [3.0, 4.0], '2': [0.0, 2.0]}, {'a': [1.0, 0.0]})
    table = recommenders.export_user_embeddings(model)
    assert np.linalg.norm(table.vectors, axis=1) == pytest.approx([1, 1])


def test_save_and_load(tmp_path, split):
    model = recommenders.train_recommender(split, _config('mf', epochs=1))
    path = str(tmp_path / 'model.bin')
    recommenders.save_model(model, path)

    loaded = recommenders.load_model(path)

    assert loaded.tag == 'mf'
    assert loaded.user_ids == model.user_ids
    assert loaded.item_ids == model.item_ids
    assert np.array_equal(loaded.user_vectors, model.user_vectors)
    assert np.array_equal(loaded.item_vectors, model.item_vectors)
    assert loaded.config_hash == model.config_hash
    assert loaded.history == model.history


def test_load_rejects_other_files(tmp_path):
    path = tmp_path / 'model.bin'
    path.write_bytes(b'not a model at all')
    with pytest.raises(TrainingError):
        recommenders.load_model(str(path))


@pytest.mark.parametrize('model', recommenders.MODEL_TAGS)
def test_training_lowers_loss(split, model):
    result = recommenders.train_recommender(
        split, _config(model, epochs=20))
    assert result.tag == model
    assert len(result.history) == 20
    assert result.history[-1]['bpr'] < result.history[0]['bpr']
    assert set(result.user_ids) == set(split.users)


def test_training_is_deterministic(split):
    first = recommenders.train_recommender(split, _config('lightgcn'))
    second = recommenders.train_recommender(split, _config('lightgcn'))
    assert np.array_equal(first.user_vectors, second.user_vectors)


def test_xsimgcl_without_noise_is_lightgcn(split):
    light = recommenders.train_recommender(split, _config('lightgcn'))
    simple = recommenders.train_recommender(
        split, _config('xsimgcl', eps=0.0, cl_weight=0.0))
    assert np.allclose(light.user_vectors, simple.user_vectors, atol=1e-12)
    assert np.allclose(light.item_vectors, simple.item_vectors, atol=1e-12)


def test_xsimgcl_adds_contrastive_term(split):
    model = recommenders.train_recommender(split, _config('xsimgcl'))
    assert model.history[0]['cl'] > 0


def test_user_without_unseen_items():
    split = make_split([(1, 'a', 5, 1), (1, 'b', 4, 2)])
    with pytest.raises(TrainingError):
        recommenders.train_recommender(split, _config('mf'))


def test_config_errors():
    cfg = recommenders.TrainConfig(
        model='xsimgcl', dim=0, lr=0, layers=2, contrast_layer=3)
    assert [key for key, _ in cfg.errors()] == ['dim', 'lr', 'contrast_layer']
    assert recommenders.TrainConfig(model='svd').errors() == [
        ('model', "unknown model 'svd'")]


def test_propagation_is_linear():
    adjacency = normalized_adjacency(
        torch.tensor([0, 0, 1]), torch.tensor([0, 1, 0]), 2, 2)
    generator = torch.Generator().manual_seed(5)
    x = torch.randn(4, 3, generator=generator, dtype=torch.float64)
    y = torch.randn(4, 3, generator=generator, dtype=torch.float64)

    combined = propagate(adjacency, 2 * x - 3 * y, 2)

    assert combined.shape == x.shape
    expected = 2 * propagate(adjacency, x, 2) - 3 * propagate(adjacency, y, 2)
    assert np.allclose(combined.numpy(), expected.numpy(), atol=1e-12)


@pytest.mark.parametrize('layers, user, item', [
    (0, [1.0, 2.0], [3.0, 4.0]),
    (1, [2.0, 3.0], [2.0, 3.0]),
    (2, [5 / 3, 8 / 3], [7 / 3, 10 / 3]),
])
def test_single_edge_propagation(layers, user, item):
    # one user, one item: the layer step swaps the two rows
    adjacency = normalized_adjacency(
        torch.tensor([0]), torch.tensor([0]), 1, 1)
    cfg = _config('lightgcn', dim=2, layers=layers)
    net = LightGCNNet(1, 1, cfg, torch.Generator().manual_seed(0),
                      adjacency=adjacency)
    with torch.no_grad():
        net.user_weight.copy_(torch.tensor([[1.0, 2.0]]))
        net.item_weight.copy_(torch.tensor([[3.0, 4.0]]))
        user_final, item_final = net.forward()

    assert np.allclose(user_final.numpy(), [user], atol=1e-12)
    assert np.allclose(item_final.numpy(), [item], atol=1e-12)

    model = EmbeddingModel(
        'lightgcn', ['1'], ['a'], user_final.numpy(), item_final.numpy())
    table = recommenders.export_user_embeddings(model)
    assert np.allclose(
        table.vectors, [np.array(user) / np.linalg.norm(user)], atol=1e-12)


def test_lightgcn_without_layers_is_mf(split):
    mf = recommenders.train_recommender(split, _config('mf'))
    flat = recommenders.train_recommender(
        split, _config('lightgcn', layers=0))
    assert flat.tag == 'lightgcn'
    assert flat.item_ids == mf.item_ids
    for user_id in split.users[:5]:
        assert np.allclose(
            flat.score_vector(user_id), mf.score_vector(user_id),
            atol=1e-12)


def test_zero_epochs_keep_initialization(split):
    model = recommenders.train_recommender(split, _config('mf', epochs=0))

    generator = torch.Generator().manual_seed(3)
    users = torch.randn(len(model.user_ids), 8, generator=generator,
                        dtype=torch.float64) * INIT_STD
    items = torch.randn(len(model.item_ids), 8, generator=generator,
                        dtype=torch.float64) * INIT_STD

    assert model.history == []
    assert np.array_equal(model.user_vectors, users.numpy())
    assert np.array_equal(model.item_vectors, items.numpy())


def _block_rows():
    """
    Two blocks of four users and four items; every user rates its whole
    block, and a different block item is each user's latest rating.
    """
    rows = []
    for block in range(2):
        for u in range(4):
            user = block * 4 + u + 1
            items = [f'b{block}i{n}' for n in range(4)]
            latest = items.pop(u)
            for n, item in enumerate(items + [latest]):
                rows.append((user, item, 5, 100 * user + n))
    return rows


def test_mf_recovers_blocks():
    split = make_split(_block_rows())
    model = recommenders.train_recommender(
        split, _config('mf', dim=2, epochs=200, lr=0.05))

    for user_id in split.users:
        block = 'b0' if int(user_id) <= 4 else 'b1'
        seen = split.train.loc[split.train['user_id'] == user_id, 'item_id']
        [top] = recommenders.top_k_unseen(model, user_id, 1, seen=seen)
        assert top.startswith(block)
        assert top == split.per_user_test_item[user_id]
