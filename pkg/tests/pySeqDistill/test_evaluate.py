import itertools
import json
import math

import numpy as np
import pandas as pd
import pytest
import torch
from numpy.testing import assert_allclose

from pySeqDistill import (AggregateReport, Catalog, ItemMeta, LossTrajectory, MetricReport, ModelConfig,
                          UserSequence, aggregate_seeds, build_model, evaluate, ndcg_at_k, rank_items,
                          recall_at_k, render_ablation, render_table, trajectory_frame, uplift)
from pySeqDistill._evaluate import format_cell, format_uplift, relevant_sets, render_text
from pySeqDistill.utils import ValidationError


def test_recall_examples():
    ranked = list(range(1, 21))
    assert recall_at_k(ranked, {1}, 10) == 1.0
    assert recall_at_k(ranked, {11}, 10) == 0.0
    assert recall_at_k(ranked, set(range(1, 16)), 10) == 1.0
    with pytest.raises(ValueError):
        recall_at_k(ranked, set(), 10)
    with pytest.raises(ValueError):
        recall_at_k(ranked, {1}, 0)


def test_ndcg_examples():
    ranked = list(range(1, 21))
    assert ndcg_at_k(ranked, {1}, 10) == 1.0
    assert ndcg_at_k(ranked, {2}, 10) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_k(ranked, {2}, 10) == pytest.approx(0.6309, abs=1e-4)
    assert ndcg_at_k(ranked, {12}, 10) == 0.0


@pytest.mark.parametrize('seed', range(10))
def test_metrics_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    ranked = [int(i) for i in rng.permutation(np.arange(1, 11))]
    relevant = set(int(i) for i in rng.choice(np.arange(1, 11), size=3, replace=False))
    k = int(rng.integers(1, 11))
    top = ranked[:k]
    assert recall_at_k(ranked, relevant, k) == len(set(top) & relevant) / min(k, 3)
    dcg = sum(1 / math.log2(r + 2) for r, item in enumerate(top) if item in relevant)
    # ideal DCG: best placement of the three relevant items
    best = max(sum(1 / math.log2(p + 2) for p in positions if p < k)
               for positions in itertools.permutations(range(10), 3))
    assert ndcg_at_k(ranked, relevant, k) == pytest.approx(dcg / best)


def test_single_relevant_item_ranks():
    k = 10
    for rank in range(1, k + 2):
        ranked = list(range(100, 100 + k + 5))
        ranked.insert(rank - 1, 1)
        recall, ndcg = recall_at_k(ranked, {1}, k), ndcg_at_k(ranked, {1}, k)
        assert recall in (0.0, 1.0)
        assert 0 <= ndcg <= recall
        assert (ndcg == recall) == (rank == 1 or rank > k)


def test_metrics_ignore_order_below_k():
    ranked = list(range(1, 21))
    shuffled = ranked[:10] + ranked[10:][::-1]
    for relevant in ({3, 15}, {12}, {1, 2, 19}):
        assert ndcg_at_k(ranked, relevant, 10) == ndcg_at_k(shuffled, relevant, 10)
        assert recall_at_k(ranked, relevant, 10) == recall_at_k(shuffled, relevant, 10)


def make_catalog(n=20):
    ids = ['i%02d' % i for i in range(1, n + 1)]
    return Catalog(dict((i, ItemMeta()) for i in ids), ids, dict((i, n) for n, i in enumerate(ids, 1)), 10)


def rigged(bias):
    model = build_model(ModelConfig('causal', 20, hidden_dim=8, num_layers=1, num_heads=2, dropout=0.0,
                                    max_len=10), seed=0).eval()
    with torch.no_grad():
        model.output.weight.zero_()
        model.output.bias.copy_(torch.as_tensor(np.concatenate([[0.0], bias]), dtype=torch.float32))
    return model


def ten_users():
    seqs = [UserSequence('u%d' % u, [1 + u % 3, 2 + u % 3], [1, 2]) for u in range(10)]
    test = pd.DataFrame({'user_id': ['u%d' % u for u in range(10)], 'item_id': ['i05'] * 10})
    return seqs, test


def test_evaluate_perfect_and_hopeless_models():
    seqs, test = ten_users()
    bias = np.zeros(20)
    bias[4] = 10.0
    report = evaluate(rigged(bias), test, seqs, make_catalog(), k_list=[10, 20], dataset='toy',
                      variant='baseline', seed=3)
    assert report.metrics == {'ndcg@10': 1.0, 'recall@10': 1.0, 'ndcg@20': 1.0, 'recall@20': 1.0}
    assert report.num_users == 10 and report.seed == 3

    report = evaluate(rigged(np.arange(1.0, 21.0)), test, seqs, make_catalog(), k_list=[10])
    assert report.metrics == {'ndcg@10': 0.0, 'recall@10': 0.0}


def test_evaluate_matches_per_user_loop():
    rng = np.random.default_rng(0)
    catalog = make_catalog()
    seqs = [UserSequence('u%d' % u, rng.choice(np.arange(1, 21), 4, replace=False).tolist(), list(range(4)))
            for u in range(10)]
    rows = []
    for s in seqs:
        unseen = [i for i in range(1, 21) if i not in s.items]
        for item in rng.choice(unseen, 2, replace=False):
            rows.append((s.user_id, catalog.item_ids[item - 1]))
    rows.append(('u0', catalog.item_ids[seqs[0].items[0] - 1]))
    rows.append(('nobody', 'i01'))
    test = pd.DataFrame(rows, columns=['user_id', 'item_id'])
    model = build_model(ModelConfig('causal', 20, hidden_dim=8, num_layers=2, num_heads=2, dropout=0.0,
                                    max_len=10), seed=4)

    report = evaluate(model, test, seqs, catalog, k_list=[5])
    ndcg, recall = [], []
    for s in seqs:
        relevant = set(catalog.item_index[i] for i in test.loc[test['user_id'] == s.user_id, 'item_id'])
        ranked = rank_items(model, s)
        ndcg.append(ndcg_at_k(ranked, relevant, 5))
        recall.append(recall_at_k(ranked, relevant, 5))
    assert report.num_users == 10
    assert report.metrics['ndcg@5'] == pytest.approx(np.mean(ndcg), abs=1e-12)
    assert report.metrics['recall@5'] == pytest.approx(np.mean(recall), abs=1e-12)
    assert evaluate(model, test, seqs, catalog, k_list=[5]) == report


def test_relevant_sets_keep_history_items_and_drop_unknown_users():
    test = pd.DataFrame({'user_id': ['a', 'a', 'b', 'c'], 'item_id': ['i01', 'i02', 'i01', 'i03']})
    out = relevant_sets(test, make_catalog(), {'a': {1}, 'b': {1}})
    assert out == {'a': {1, 2}, 'b': {1}}


def test_repeated_training_item_scores_zero():
    seqs = [UserSequence('a', [1, 2], [1, 2])]
    test = pd.DataFrame({'user_id': ['a'], 'item_id': ['i01']})
    report = evaluate(rigged(np.arange(20.0, 0.0, -1.0)), test, seqs, make_catalog())
    assert report.num_users == 1
    assert report.metrics == {'ndcg@10': 0.0, 'recall@10': 0.0}


def test_evaluate_without_eligible_users():
    seqs, test = ten_users()
    test = test.assign(user_id='stranger')
    with pytest.raises(ValueError):
        evaluate(rigged(np.zeros(20)), test, seqs, make_catalog())


def report(value, seed=0, variant='baseline', dataset='beauty'):
    return MetricReport(dataset, variant, seed, {'ndcg@10': value, 'recall@10': 2 * value})


def test_metric_report_validation_and_json():
    with pytest.raises(ValidationError):
        MetricReport('beauty', 'baseline', 0, {'ndcg@10': 1.5})
    r = report(0.25)
    assert json.loads(r.to_json())['metrics'] == {'ndcg@10': 0.25, 'recall@10': 0.5}
    assert MetricReport.from_dict(json.loads(r.to_json())) == r


def test_aggregate_two_seeds():
    agg = aggregate_seeds([report(0.01, 0), report(0.03, 1)])
    mean, std, n = agg.metrics['ndcg@10']
    assert mean == pytest.approx(0.02)
    assert std == pytest.approx(0.0141421, abs=1e-6)
    assert n == 2


def test_aggregate_identical_and_permuted():
    assert aggregate_seeds([report(0.1, s) for s in range(5)]).metrics['ndcg@10'][1] == 0.0
    reports = [report(v, s) for s, v in enumerate([0.1, 0.4, 0.2, 0.05])]
    a = aggregate_seeds(reports).metrics['ndcg@10']
    b = aggregate_seeds(reports[::-1]).metrics['ndcg@10']
    assert a[0] == pytest.approx(b[0]) and a[1] == pytest.approx(b[1])
    assert aggregate_seeds([report(0.3)]).metrics['ndcg@10'] == (0.3, 0.0, 1)


def test_aggregate_refuses_mixed_reports():
    with pytest.raises(ValidationError):
        aggregate_seeds([report(0.1), report(0.1, variant='distilled')])
    with pytest.raises(ValueError):
        aggregate_seeds([])


def aggregate(variant, ndcg, recall, dataset='beauty'):
    return AggregateReport(dataset, variant, {'ndcg@10': (ndcg, 0.0004, 5), 'recall@10': (recall, 0.001, 5)},
                           None)


def test_uplift_examples():
    up = uplift(aggregate('baseline', 0.10, 0.2), aggregate('distilled', 0.11, 0.2))
    assert up['ndcg@10'] == pytest.approx(10.0)
    assert format_uplift(up['ndcg@10']) == '+10.00%'
    assert format_uplift(up['recall@10']) == '+0.00%'
    up = uplift(aggregate('baseline', 0.0106, 0.1), aggregate('distilled', 0.0111, 0.1))
    assert format_uplift(up['ndcg@10']) == '+4.72%'
    assert format_uplift(-3.0) == '-3.00%'


def test_uplift_errors():
    with pytest.raises(ValueError):
        uplift(aggregate('baseline', 0.0, 0.1), aggregate('distilled', 0.1, 0.1))
    with pytest.raises(ValueError):
        uplift(aggregate('baseline', 0.1, 0.1), aggregate('distilled', 0.1, 0.1, dataset='kion'))


def test_format_cell():
    assert format_cell(0.0106, 0.0004) == '0.0106 ±0.0004'
    assert format_cell(0.12345, 0.0, digits=2) == '0.12 ±0.00'


def test_render_table_layout():
    table = render_table([aggregate('baseline', 0.0106, 0.02), aggregate('distilled', 0.0111, 0.021)])
    assert list(table.index) == ['baseline', 'distilled', 'Uplift (%)']
    assert list(table.columns) == ['NDCG@10', 'Recall@10']
    assert table.loc['baseline', 'NDCG@10'] == '0.0106 ±0.0004'
    assert table.loc['Uplift (%)', 'NDCG@10'] == '+4.72%'
    assert table.loc['Uplift (%)', 'Recall@10'] == '+5.00%'
    text = render_text('beauty: test metrics', table, ['baseline: 5 seeds'])
    assert text.startswith('beauty: test metrics\n====================\n')
    assert '* baseline: 5 seeds' in text


def test_render_ablation_order():
    cells = [{'alpha': a, 'use_dynamic_beta': b, 'metrics': {'ndcg@10': (0.01 * a, 0.0, 5)}}
             for a in (0.8, 0.4, 0.6) for b in (True, False)]
    table = render_ablation(cells)
    assert list(table.columns) == ['beta', 'alpha', 'NDCG@10']
    assert list(table['beta']) == ['no'] * 3 + ['yes'] * 3
    assert list(table['alpha']) == [0.4, 0.6, 0.8] * 2
    assert table['NDCG@10'].iloc[0] == 0.004


def test_render_ablation_layer_column():
    cells = [{'alpha': 0.4, 'use_dynamic_beta': True, 'distill_layer': k, 'metrics': {'ndcg@10': (0.1 * k, 0.0, 1)}}
             for k in (2, 1)]
    table = render_ablation(cells)
    assert list(table.columns) == ['beta', 'alpha', 'layer', 'NDCG@10']
    assert list(table['layer']) == [1, 2]
    same = render_ablation([dict(c, distill_layer=2) for c in cells])
    assert list(same.columns) == ['beta', 'alpha', 'NDCG@10']


def test_trajectory_frame():
    base = LossTrajectory(0, [{'epoch': e, 'phase': 'finetune', 'l_model': 1.0, 'l_distill': 0.5, 'beta': 2.0}
                              for e in range(3)])
    dist = LossTrajectory(1, [{'epoch': e, 'phase': 'distill' if e < 1 else 'finetune', 'l_model': 1.0,
                               'l_distill': 0.1 * (e + 1), 'beta': 10.0} for e in range(3)])
    frame = trajectory_frame({'baseline': base, 'distilled': dist})
    assert list(frame.columns) == ['baseline', 'distilled']
    assert list(frame.index) == [0, 1, 2]
    assert frame.attrs['transition'] == {'baseline': 0, 'distilled': 1}
    assert frame.loc[2, 'distilled'] == pytest.approx(0.3)


def test_trajectory_frame_prefers_eval_mode_values():
    traj = LossTrajectory(0)
    for e in range(3):
        traj.append(e, 1.0, 0.5, 2.0, l_recon=0.25 - 0.05 * e)
    frame = trajectory_frame({'baseline': traj})
    assert_allclose(frame['baseline'].values, [0.25, 0.2, 0.15])


def test_metrics_match_brute_force_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 21))
        ranked = [int(i) for i in rng.permutation(n) + 1]
        relevant = set(int(i) for i in rng.choice(np.arange(1, n + 1), size=int(rng.integers(1, min(5, n) + 1)),
                                                   replace=False))
        k = int(rng.integers(1, 21))
        hits = [r for r, item in enumerate(ranked[:k], 1) if item in relevant]
        ideal = sum(1 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
        assert recall_at_k(ranked, relevant, k) == pytest.approx(len(hits) / min(k, len(relevant)))
        assert ndcg_at_k(ranked, relevant, k) == pytest.approx(sum(1 / math.log2(r + 1) for r in hits) / ideal)
    assert abs(ndcg_at_k(list(range(1, 21)), {2}, 10) - 1 / math.log2(3)) <= 1e-9
