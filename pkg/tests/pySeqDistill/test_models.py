import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from numpy.testing import assert_allclose, assert_array_equal

from pySeqDistill import (ModelConfig, PoolingConfig, UserSequence, build_model, exp_pool, load_checkpoint,
                          mean_pool, next_item_loss, rank_items, save_checkpoint)
from pySeqDistill._models import (causal_batch, exp_weights, inference_items, masked_batch, pad_batch, pool,
                                  rank_from_scores, score_sequences)
from pySeqDistill.utils import ValidationError


def config(architecture='causal', num_items=20, **kwargs):
    kwargs = dict(dict(hidden_dim=16, num_layers=2, num_heads=2, dropout=0.0, max_len=8), **kwargs)
    return ModelConfig(architecture, num_items, **kwargs)


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig('causal', 10, hidden_dim=10, num_heads=4)
    with pytest.raises(ValidationError):
        ModelConfig('recurrent', 10)
    assert config().vocab_size == 21 and config().mask_index is None
    assert config('masked').vocab_size == 22 and config('masked').mask_index == 21
    with pytest.raises(ValidationError):
        PoolingConfig('max')


def test_pad_batch_left_pads_and_truncates():
    assert pad_batch([[1, 2], [1, 2, 3, 4, 5]], 4).tolist() == [[0, 0, 1, 2], [2, 3, 4, 5]]


def test_causal_batch_shifts_targets():
    inputs, targets = causal_batch([UserSequence('u', [4, 5, 6], [1, 2, 3])], 4)
    assert inputs.tolist() == [[0, 0, 4, 5]]
    assert targets.tolist() == [[0, 0, 5, 6]]


@pytest.mark.parametrize('architecture', ['causal', 'masked'])
def test_forward_shape_contract(architecture):
    model = build_model(config(architecture), seed=0).eval()
    logits, hidden = model(pad_batch([[1, 2, 3]], 8))
    assert logits.shape == (1, 8, model.config.vocab_size)
    assert len(hidden.states) == 2
    assert all(s.shape == (1, 8, 16) for s in hidden.states)
    assert hidden.mask.tolist() == [[False] * 5 + [True] * 3]
    with pytest.raises(ValueError):
        hidden.layer(3)


def test_forward_rejects_bad_input():
    model = build_model(config(), seed=0)
    with pytest.raises(ValueError):
        model(pad_batch([[1, 2], []], 8))
    with pytest.raises(ValueError):
        model(torch.tensor([[1, 99]]))
    with pytest.raises(ValueError):
        model(torch.ones((1, 9), dtype=torch.long))


def test_build_model_is_seeded():
    a, b = build_model(config(), seed=3), build_model(config(), seed=3)
    for (name, p), q in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(p, q), name


@pytest.mark.parametrize('seed', range(3))
def test_causal_model_ignores_future_items(seed):
    model = build_model(config(), seed=seed).eval()
    rng = np.random.default_rng(seed)
    items = torch.as_tensor(rng.integers(1, 21, size=(1, 8)))
    _, base = model(items)
    for j in range(1, 8):
        changed = items.clone()
        changed[0, j:] = torch.as_tensor(rng.integers(1, 21, size=8 - j))
        _, hidden = model(changed)
        for before, after in zip(base.states, hidden.states):
            assert torch.allclose(before[0, :j], after[0, :j], atol=1e-5)


@pytest.mark.parametrize('architecture', ['causal', 'masked'])
def test_padding_does_not_change_real_positions(architecture):
    model = build_model(config(architecture), seed=1).eval()
    logits_short, hidden_short = model(torch.tensor([[3, 4, 5]]))
    logits_pad, hidden_pad = model(pad_batch([[3, 4, 5]], 8))
    assert torch.allclose(logits_short[0], logits_pad[0, -3:], atol=1e-5)
    for short, padded in zip(hidden_short.states, hidden_pad.states):
        assert torch.allclose(short[0], padded[0, -3:], atol=1e-5)


def test_mean_pool_examples():
    v = torch.tensor([0.3, -1.0, 2.0])
    assert torch.allclose(mean_pool(v.repeat(1, 4, 1), torch.ones(1, 4, dtype=torch.bool)), v)
    two = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    assert mean_pool(two, torch.ones(1, 2, dtype=torch.bool)).tolist() == [[0.5, 0.5]]


def test_mean_pool_matches_loop():
    gen = torch.Generator().manual_seed(0)
    hidden = torch.randn(6, 7, 5, generator=gen, dtype=torch.float64)
    mask = torch.rand(6, 7, generator=gen) < 0.5
    mask[:, -1] = True
    pooled = mean_pool(hidden, mask)
    for b in range(6):
        rows = [hidden[b, t] for t in range(7) if mask[b, t]]
        assert torch.allclose(pooled[b], sum(rows) / len(rows))


def test_pooling_needs_a_real_position():
    with pytest.raises(ValueError):
        mean_pool(torch.zeros(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))


def test_exp_weights_three_positions():
    mask = torch.tensor([[False, False, True, True, True]])
    w = exp_weights(mask, 1.0)[0]
    assert_allclose(w.numpy(), [0, 0, 0.0900, 0.2447, 0.6652], atol=1e-4)
    assert float(w.sum()) == pytest.approx(1.0)


def test_exp_pool_limits():
    gen = torch.Generator().manual_seed(1)
    hidden = torch.randn(3, 5, 4, generator=gen, dtype=torch.float64)
    mask = torch.ones(3, 5, dtype=torch.bool)
    mask[0, :2] = False
    assert torch.equal(exp_pool(hidden, mask, 0.0), mean_pool(hidden, mask))
    assert torch.allclose(exp_pool(hidden, mask, 1e-9), mean_pool(hidden, mask), atol=1e-6)
    assert torch.allclose(exp_pool(hidden, mask, 50.0), hidden[:, -1], atol=1e-6)
    with pytest.raises(ValueError):
        exp_pool(hidden, mask, -1.0)


def test_pool_selects_layer_and_strategy():
    model = build_model(config(), seed=0).eval()
    _, hidden = model(pad_batch([[1, 2, 3]], 8))
    assert torch.equal(pool(hidden, 1, PoolingConfig('mean')), mean_pool(hidden.states[0], hidden.mask))
    assert torch.equal(pool(hidden, 2, PoolingConfig('exp', 0.5)), exp_pool(hidden.states[1], hidden.mask, 0.5))


def test_next_item_loss_uniform_logits():
    logits = torch.zeros(2, 4, 11)
    targets = torch.tensor([[0, 3, 4, 5], [1, 2, 0, 10]])
    assert float(next_item_loss(logits, targets)) == pytest.approx(math.log(11))


def test_next_item_loss_margin():
    targets = torch.tensor([[2, 3]])
    logits = F.one_hot(targets, 5).double() * 50
    assert float(next_item_loss(logits, targets)) < 1e-10


def test_next_item_loss_matches_log_softmax():
    gen = torch.Generator().manual_seed(2)
    logits = torch.randn(4, 6, 9, generator=gen, dtype=torch.float64)
    targets = torch.randint(0, 9, (4, 6), generator=gen)
    targets[0, 0] = 3
    mask = torch.rand(4, 6, generator=gen) < 0.8
    mask[0, 0] = True
    logp = torch.log_softmax(logits, dim=-1)
    terms = [-logp[b, t, targets[b, t]] for b in range(4) for t in range(6)
             if targets[b, t] != 0 and mask[b, t]]
    assert float(next_item_loss(logits, targets, mask)) == pytest.approx(float(sum(terms) / len(terms)))
    with pytest.raises(ValueError):
        next_item_loss(logits, torch.zeros_like(targets))


def rigged(bias):
    model = build_model(config(), seed=0).eval()
    with torch.no_grad():
        model.output.weight.zero_()
        model.output.bias.copy_(torch.as_tensor(bias, dtype=torch.float32))
    return model


def test_rank_rigged_item_first():
    bias = np.zeros(21)
    bias[7] = 5.0
    ranked = rank_items(rigged(bias), UserSequence('u', [1, 2], [1, 2]))
    assert ranked[0] == 7
    assert len(ranked) == 18 and 1 not in ranked and 2 not in ranked
    assert len(rank_items(rigged(bias), UserSequence('u', [1, 2], [1, 2]), exclude_history=False)) == 20


def test_rank_ties_lower_index_first():
    bias = np.zeros(21)
    bias[[5, 3]] = 2.0
    assert list(rank_items(rigged(bias), UserSequence('u', [1], [1]))[:2]) == [3, 5]


def test_rank_from_scores_matches_argsort():
    rng = np.random.default_rng(4)
    scores = np.round(rng.standard_normal(20), 1)
    expected = sorted(range(1, 21), key=lambda i: (-scores[i - 1], i))
    assert list(rank_from_scores(scores)) == expected
    assert list(rank_from_scores(scores, {expected[0]})) == expected[1:]


def test_masked_inference_appends_mask_token():
    c = config('masked')
    assert inference_items(c, [1, 2, 3]) == [1, 2, 3, 21]
    assert len(inference_items(c, list(range(1, 20)))) == 8
    assert inference_items(config(), list(range(1, 20))) == list(range(12, 20))


def test_masked_batch_masks_every_row():
    seqs = [UserSequence('u%d' % i, list(range(1, 2 + i)), list(range(1 + i))) for i in range(10)]
    gen = torch.Generator().manual_seed(0)
    inputs, targets = masked_batch(seqs, 8, 21, mask_prob=0.0, last_mask_prob=0.0, generator=gen)
    masked = inputs == 21
    assert masked.sum(dim=1).tolist() == [1] * 10
    assert torch.equal(masked, targets != 0)
    assert targets[:, -1].tolist() == [s.items[-1] for s in seqs]


def test_score_sequences_shape_and_mode():
    model = build_model(config(dropout=0.3), seed=0).train()
    seqs = [UserSequence('u', [1, 2, 3], [1, 2, 3]), UserSequence('v', [4], [1])]
    scores = score_sequences(model, seqs, batch_size=1)
    assert scores.shape == (2, 20)
    assert model.training
    assert_allclose(scores, score_sequences(model, seqs), atol=1e-6)


def test_checkpoint_round_trip(tmpdir):
    model = build_model(config('masked'), seed=5)
    path = str(tmpdir.join('checkpoint.pt'))
    save_checkpoint(model, path, seed=5, manifest_digest='abc')
    loaded, payload = load_checkpoint(path)
    assert payload['seed'] == 5 and payload['manifest_digest'] == 'abc'
    assert loaded.config == model.config
    seqs = [UserSequence('u', [1, 2, 3], [1, 2, 3])]
    assert_array_equal(score_sequences(loaded, seqs), score_sequences(model, seqs))


def test_pooling_suite_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(500):
        gamma = float(rng.uniform(0, 10))
        m, d = int(rng.integers(1, 201)), int(rng.integers(1, 6))
        n = m + int(rng.integers(0, 11))
        hidden = torch.from_numpy(rng.standard_normal((1, n, d)))
        mask = torch.zeros(1, n, dtype=torch.bool)
        mask[0, n - m:] = True
        w = exp_weights(mask, gamma)
        assert abs(float(w.sum()) - 1.0) <= 1e-6
        assert float(w[0, :n - m].abs().sum()) == 0.0
        assert torch.allclose(exp_pool(hidden, mask, 0.0), mean_pool(hidden, mask), atol=1e-6)
        # padding content never leaks into the pooled state
        noisy = hidden.clone()
        noisy[0, :n - m] = torch.from_numpy(rng.standard_normal((n - m, d)))
        assert torch.allclose(exp_pool(noisy, mask, gamma), exp_pool(hidden, mask, gamma), atol=1e-12)
        assert torch.allclose(exp_pool(hidden[:, n - m:], mask[:, n - m:], gamma), exp_pool(hidden, mask, gamma),
                              atol=1e-12)
