"""
pySeqDistill Toy Data
=====================
A small synthetic interaction log with latent user clusters, used for
offline end-to-end runs. Items belong to clusters; users mostly consume items
of their own cluster, drifting along a per-cluster item order so that the
next item is predictable from the recent ones.
"""

import logging
import os

import numpy as np
import pandas as pd
from scipy.special import softmax

log = logging.getLogger(__name__)

GENRES = ['Drama', 'Comedy', 'Action', 'Documentary', 'Animation', 'Horror', 'Romance', 'Sci-Fi']
TOY_FILES = {'interactions': 'interactions.tsv', 'items': 'items.tsv', 'user_clusters': 'user_clusters.tsv'}


def _user_history(rng, pools, weights, cluster, length, in_cluster, n_items):
    pool = pools[cluster]
    seen = set()
    items = []
    pos = rng.choice(len(pool), p=weights)
    while len(items) < length:
        if rng.random() < in_cluster:
            if items and rng.random() < 0.6:
                pos = (pos + rng.integers(1, 4)) % len(pool)
            else:
                pos = rng.choice(len(pool), p=weights)
            item = pool[pos]
            if item in seen:
                unseen = [i for i in pool if i not in seen]
                if not unseen:
                    continue
                item = unseen[rng.integers(len(unseen))]
        else:
            item = int(rng.integers(n_items))
            if item in seen:
                continue
        seen.add(item)
        items.append(item)
    return items


def make_toy_dataset(out_dir, n_users=500, n_items=200, n_clusters=5, seed=0, min_len=8, max_len=30,
                     in_cluster=0.85):
    """Write ``interactions.tsv``, ``items.tsv`` and ``user_clusters.tsv``.

    Parameters
    ----------
    out_dir : string
    n_users, n_items, n_clusters : int
    seed : int
        The files are a function of the arguments only.
    min_len, max_len : int
        Range of interactions per user.
    in_cluster : float
        Probability that an interaction stays inside the user's cluster.

    Returns
    -------
    paths : dict
        `interactions`, `items` and `user_clusters` file paths.
    """
    if n_items < n_clusters or max_len > n_items // n_clusters:
        raise ValueError('every cluster needs at least max_len items')
    rng = np.random.default_rng(seed)
    pools = [list(range(c, n_items, n_clusters)) for c in range(n_clusters)]
    pool_size = min(len(p) for p in pools)
    pools = [p[:pool_size] for p in pools]
    weights = softmax(-np.arange(pool_size) / (pool_size / 4.0))

    rows, clusters = [], []
    for u in range(n_users):
        user_id = 'u{0:04d}'.format(u)
        cluster = u % n_clusters
        length = int(rng.integers(min_len, max_len + 1))
        items = _user_history(rng, pools, weights, cluster, length, in_cluster, n_items)
        t = int(rng.integers(0, 60 * 86400))
        for item in items:
            t += int(rng.integers(3600, 3 * 86400))
            own = item % n_clusters == cluster
            rating = int(rng.integers(4, 6)) if own else int(rng.integers(1, 4))
            rows.append((user_id, 'i{0:04d}'.format(item), t, rating))
        clusters.append((user_id, cluster))

    items = []
    for i in range(n_items):
        c = i % n_clusters
        genres = [GENRES[c % len(GENRES)], GENRES[(c + i) % len(GENRES)]]
        items.append(('i{0:04d}'.format(i), 'Item {0}'.format(i), 'cluster-{0}|tier-{1}'.format(c, i % 3),
                      'A synthetic item from group {0}.'.format(c), '|'.join(sorted(set(genres)))))

    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    paths = dict((k, os.path.join(out_dir, v)) for k, v in TOY_FILES.items())
    pd.DataFrame(rows, columns=['user_id', 'item_id', 'timestamp', 'rating']).to_csv(
        paths['interactions'], sep='\t', index=False)
    pd.DataFrame(items, columns=['item_id', 'title', 'categories', 'description', 'genres']).to_csv(
        paths['items'], sep='\t', index=False)
    pd.DataFrame(clusters, columns=['user_id', 'cluster']).to_csv(paths['user_clusters'], sep='\t', index=False)
    log.info('toy dataset users=%d items=%d interactions=%d clusters=%d dir=%s',
             n_users, n_items, len(rows), n_clusters, out_dir)
    return paths


def read_user_clusters(path):
    """user_id -> cluster label."""
    df = pd.read_csv(path, sep='\t', dtype={'user_id': str})
    return dict(zip(df['user_id'], df['cluster'].astype(int)))
