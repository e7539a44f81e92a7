"""
pySeqDistill Evaluate
=====================
Top-k ranking metrics, per-seed reports, aggregation over seeds, uplift and
the report tables.
"""

from collections import namedtuple
import json
import logging
import math

import jinja2
import numpy as np
import pandas as pd

from ._models import rank_from_scores, score_sequences
from .utils import NumPyEncoder, ValidationError

log = logging.getLogger(__name__)

TEXT_REPORT = jinja2.Template("""\
{{ title }}
{{ '=' * title|length }}

{{ table }}
{% if notes %}
{% for note in notes %}* {{ note }}
{% endfor %}{% endif %}""", keep_trailing_newline=True)


def _check(relevant, k):
    if k < 1:
        raise ValueError('k must be >= 1')
    if not relevant:
        raise ValueError('the relevant set is empty')


def recall_at_k(ranked, relevant, k):
    """Share of relevant items in the top `k`, normalised by ``min(k, |relevant|)``."""
    _check(relevant, k)
    hits = len(set(list(ranked)[:k]) & set(relevant))
    return hits / float(min(k, len(relevant)))


def ndcg_at_k(ranked, relevant, k):
    """Binary-relevance NDCG: each hit at rank r adds ``1 / log2(r + 1)``."""
    _check(relevant, k)
    relevant = set(relevant)
    dcg = sum(1.0 / math.log2(r + 1) for r, item in enumerate(list(ranked)[:k], 1) if item in relevant)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


class MetricReport(namedtuple('MetricReport', ['dataset', 'variant', 'seed', 'metrics',
                                               'num_users', 'config_digest'])):
    """Metrics of one trained model; `metrics` maps names like ``ndcg@10`` to values."""
    __slots__ = ()

    def __new__(cls, dataset, variant, seed, metrics, num_users=None, config_digest=None):
        bad = ['{0}={1}'.format(k, v) for k, v in metrics.items() if not 0 <= v <= 1]
        if bad:
            raise ValidationError('metric values outside [0, 1]: ' + ', '.join(bad))
        return super(MetricReport, cls).__new__(cls, dataset, variant, int(seed), dict(metrics),
                                                num_users, config_digest)

    def to_dict(self):
        return dict(self._asdict())

    def to_json(self):
        return json.dumps(self.to_dict(), cls=NumPyEncoder, sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class AggregateReport(namedtuple('AggregateReport', ['dataset', 'variant', 'metrics', 'uplift_pct'])):
    """`metrics` maps each name to ``(mean, std, n_seeds)``."""
    __slots__ = ()

    def mean(self, name):
        return self.metrics[name][0]

    def to_dict(self):
        return {'dataset': self.dataset, 'variant': self.variant, 'uplift_pct': self.uplift_pct,
                'metrics': dict((k, {'mean': m, 'std': s, 'n': n}) for k, (m, s, n) in self.metrics.items())}


def relevant_sets(test, catalog, histories):
    """Per-user test items, for users with a training history.

    Parameters
    ----------
    test : DataFrame
        Test-period interactions.
    catalog : Catalog
    histories : dict
        user_id -> set of dense item indices seen in training.

    Returns
    -------
    relevant : dict
        user_id -> set of dense item indices. Test items the user already
        had in training stay in the set; the ranking never surfaces them, so
        they count as misses.
    """
    index = test['item_id'].map(catalog.item_index)
    unknown = int(index.isnull().sum())
    if unknown:
        log.warning('test interactions with items outside the catalog count=%d', unknown)
    frame = pd.DataFrame({'user_id': test['user_id'], 'index': index}).dropna()
    out = {}
    for user_id, group in frame.groupby('user_id', sort=True):
        if user_id not in histories:
            continue
        out[user_id] = set(int(i) for i in group['index'])
    return out


def evaluate(model, test, sequences, catalog, k_list=(10,), histories=None, dataset='', variant='',
             seed=0, config_digest=None, batch_size=256):
    """Average NDCG@k and Recall@k over eligible test users.

    Parameters
    ----------
    model : SequentialRecommender
    test : DataFrame
        Test-period interactions.
    sequences : list of UserSequence
        Training sequences used as model input.
    catalog : Catalog
    k_list : list of int
    histories : dict (optional)
        user_id -> items excluded from ranking; defaults to the items of
        `sequences`. Every user with a history and at least one test item is
        averaged in.

    Returns
    -------
    report : MetricReport
    """
    if histories is None:
        histories = dict((s.user_id, set(s.items)) for s in sequences)
    relevant = relevant_sets(test, catalog, histories)
    eligible = [s for s in sequences if s.user_id in relevant and len(s.items)]
    if not eligible:
        raise ValueError('no eligible test users')
    scores = score_sequences(model, eligible, batch_size)
    sums = dict(('{0}@{1}'.format(m, k), 0.0) for k in k_list for m in ('ndcg', 'recall'))
    for s, row in zip(eligible, scores):
        ranked = rank_from_scores(row, histories[s.user_id])
        for k in k_list:
            sums['ndcg@{0}'.format(k)] += ndcg_at_k(ranked, relevant[s.user_id], k)
            sums['recall@{0}'.format(k)] += recall_at_k(ranked, relevant[s.user_id], k)
    metrics = dict((name, total / len(eligible)) for name, total in sums.items())
    log.info('evaluated dataset=%s variant=%s seed=%d users=%d %s', dataset, variant, seed, len(eligible),
             ' '.join('{0}={1:.4f}'.format(k, v) for k, v in sorted(metrics.items())))
    return MetricReport(dataset, variant, seed, metrics, len(eligible), config_digest)


def aggregate_seeds(reports):
    """Mean, sample standard deviation (n - 1) and seed count per metric."""
    if not reports:
        raise ValueError('no reports to aggregate')
    variants = set(r.variant for r in reports)
    datasets = set(r.dataset for r in reports)
    if len(variants) > 1 or len(datasets) > 1:
        raise ValidationError('cannot aggregate mixed reports: variants={0} datasets={1}'
                              .format(sorted(variants), sorted(datasets)))
    names = sorted(set().union(*[r.metrics for r in reports]))
    metrics = {}
    for name in names:
        values = np.array([r.metrics[name] for r in reports if name in r.metrics], dtype=np.float64)
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        metrics[name] = (float(values.mean()), std, len(values))
    return AggregateReport(reports[0].dataset, reports[0].variant, metrics, None)


def uplift(baseline, treatment):
    """Percent change of each mean metric, ``100 * (treatment / baseline - 1)``."""
    if baseline.dataset != treatment.dataset:
        raise ValueError('uplift across datasets {0!r} and {1!r}'.format(baseline.dataset, treatment.dataset))
    if set(baseline.metrics) != set(treatment.metrics):
        raise ValueError('metric keys differ: {0} vs {1}'.format(sorted(baseline.metrics),
                                                                 sorted(treatment.metrics)))
    out = {}
    for name in sorted(baseline.metrics):
        base = baseline.mean(name)
        if base == 0:
            raise ValueError('baseline mean of {0} is 0'.format(name))
        out[name] = 100.0 * (treatment.mean(name) / base - 1.0)
    return out


def format_uplift(pct):
    return '{0:+.2f}%'.format(pct)


def format_cell(mean, std, digits=4):
    """``0.0106 ±0.0004``"""
    return '{0:.{2}f} ±{1:.{2}f}'.format(mean, std, digits)


def _metric_label(name):
    metric, k = name.split('@')
    return {'ndcg': 'NDCG', 'recall': 'Recall'}.get(metric, metric) + '@' + k


def render_table(aggregates, baseline_variant='baseline', digits=4):
    """Seed-aggregated metrics, one row per variant plus an ``Uplift (%)``
    row for every other variant against `baseline_variant`.

    Parameters
    ----------
    aggregates : list of AggregateReport
        One per variant, same dataset.

    Returns
    -------
    table : DataFrame
        String cells, index named ``variant``.
    """
    if not aggregates:
        raise ValueError('nothing to render')
    names = sorted(aggregates[0].metrics, key=lambda n: (n.split('@')[0] != 'ndcg', n))
    rows, index = [], []
    base = [a for a in aggregates if a.variant == baseline_variant]
    for agg in aggregates:
        rows.append([format_cell(*agg.metrics[n][:2], digits=digits) for n in names])
        index.append(agg.variant)
    for agg in aggregates:
        if base and agg.variant != baseline_variant:
            up = uplift(base[0], agg)
            rows.append([format_uplift(up[n]) for n in names])
            index.append('Uplift (%)' if len(aggregates) == 2 else 'Uplift (%) ' + agg.variant)
    table = pd.DataFrame(rows, index=pd.Index(index, name='variant'),
                         columns=[_metric_label(n) for n in names])
    return table


def render_ablation(cells, metric='ndcg@10', digits=4):
    """Ablation over alpha and dynamic beta, rows ordered beta off then on and
    by alpha. A `layer` column is added when the cells span more than one
    distillation layer.

    Parameters
    ----------
    cells : list of dict
        Each with `alpha`, `use_dynamic_beta`, optionally `distill_layer`, and
        the aggregated `metrics` (name -> (mean, std, n)).
    """
    keys = ['beta', 'alpha']
    if len(set(c.get('distill_layer') for c in cells)) > 1:
        keys.append('layer')
    rows = [{'beta': 'yes' if c['use_dynamic_beta'] else 'no',
             'alpha': c['alpha'],
             'layer': c.get('distill_layer'),
             _metric_label(metric): round(c['metrics'][metric][0], digits)} for c in cells]
    table = pd.DataFrame(rows, columns=keys + [_metric_label(metric)])
    return table.sort_values(keys, kind='mergesort').reset_index(drop=True)


def trajectory_frame(trajectories):
    """Per-epoch reconstruction loss for each variant: `l_recon` where it was
    recorded, the training-batch `l_distill` otherwise.

    Parameters
    ----------
    trajectories : dict
        variant -> LossTrajectory.

    Returns
    -------
    frame : DataFrame
        Indexed by epoch, one column per variant; ``frame.attrs['transition']``
        holds each variant's phase-transition epoch.
    """
    columns = {}
    for variant, traj in sorted(trajectories.items()):
        f = traj.frame()
        column = 'l_recon' if f['l_recon'].notnull().any() else 'l_distill'
        columns[variant] = pd.Series(f[column].astype(float).values, index=f['epoch'].values)
    frame = pd.DataFrame(columns)
    frame.index.name = 'epoch'
    frame.attrs['transition'] = dict((v, t.transition) for v, t in trajectories.items())
    return frame


def render_text(title, table, notes=()):
    """Plain-text rendering of a report table."""
    return TEXT_REPORT.render(title=title, table=table.to_string(), notes=list(notes))
