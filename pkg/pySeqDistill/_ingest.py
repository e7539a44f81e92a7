"""
pySeqDistill Ingest
===================
Loading interaction logs, k-core filtering, the global temporal split and
construction of fixed-length user sequences.
"""

from collections import namedtuple
import logging
import math
import os

import numpy as np
import pandas as pd

from .utils import ConfigError, ValidationError

log = logging.getLogger(__name__)

INTERACTION_COLUMNS = ['user_id', 'item_id', 'timestamp', 'rating']
ITEM_FIELDS = ['title', 'categories', 'description', 'genres']
PAD_INDEX = 0


class InteractionRecord(namedtuple('InteractionRecord', INTERACTION_COLUMNS)):
    __slots__ = ()

    def __new__(cls, user_id, item_id, timestamp, rating=None):
        return super(InteractionRecord, cls).__new__(cls, user_id, item_id, timestamp, rating)


class ItemMeta(namedtuple('ItemMeta', ITEM_FIELDS)):
    __slots__ = ()

    def __new__(cls, title=None, categories=None, description=None, genres=None):
        return super(ItemMeta, cls).__new__(cls, title, categories, description, genres)


class UserSequence(namedtuple('UserSequence', ['user_id', 'items', 'timestamps', 'ratings'])):
    """Chronological (oldest first) dense item indices of one user."""
    __slots__ = ()

    def __new__(cls, user_id, items, timestamps, ratings=None):
        return super(UserSequence, cls).__new__(cls, user_id, list(items), list(timestamps), ratings)

    def __len__(self):
        return len(self.items)


SplitDataset = namedtuple('SplitDataset', ['train', 'test', 'threshold'])


class UnsplittableError(ValidationError):
    pass


class Catalog(namedtuple('Catalog', ['items', 'item_ids', 'item_index', 'num_users'])):
    """Item metadata plus the dense index (0 is padding, real items are 1..M).

    `item_ids[i - 1]` is the id of dense index `i`; `item_index` is the inverse.
    """
    __slots__ = ()

    @property
    def num_items(self):
        return len(self.item_ids)

    def id_of(self, index):
        if index < 1 or index > len(self.item_ids):
            raise KeyError(index)
        return self.item_ids[index - 1]

    def meta_of(self, index):
        return self.items[self.id_of(index)]


class DatasetStats(namedtuple('DatasetStats', ['num_users', 'num_items', 'num_interactions',
                                               'avg_length', 'density'])):
    __slots__ = ()

    @classmethod
    def from_counts(cls, num_users, num_items, num_interactions):
        return cls(int(num_users), int(num_items), int(num_interactions),
                   num_interactions / float(num_users),
                   num_interactions / (float(num_users) * num_items))

    def to_dict(self):
        return dict(self._asdict())


def interactions_frame(records):
    """Coerce a DataFrame or an iterable of InteractionRecord into the
    canonical interaction frame (`INTERACTION_COLUMNS`, input order kept)."""
    if isinstance(records, pd.DataFrame):
        df = records.copy()
        if 'rating' not in df.columns:
            df['rating'] = np.nan
        df = df[INTERACTION_COLUMNS]
    else:
        df = pd.DataFrame([tuple(r) for r in records], columns=INTERACTION_COLUMNS)
    df['rating'] = pd.to_numeric(df['rating'], errors='coerce')
    df['timestamp'] = df['timestamp'].astype(np.int64)
    return df.reset_index(drop=True)


def to_records(df):
    """The inverse of :func:`interactions_frame`."""
    return [InteractionRecord(u, i, int(t), None if pd.isnull(r) else float(r))
            for u, i, t, r in df[INTERACTION_COLUMNS].itertuples(index=False, name=None)]


def k_core_filter(records, k=5):
    """Iteratively drop users and items with fewer than `k` interactions.

    Parameters
    ----------
    records : DataFrame or iterable of InteractionRecord
    k : int, >= 1

    Returns
    -------
    filtered : DataFrame
        The maximal subset in which every user and every item has at least
        `k` interactions; surviving rows keep their relative order.
    """
    if k < 1:
        raise ValueError('k must be >= 1, got {0}'.format(k))
    df = interactions_frame(records)
    rounds = 0
    while len(df):
        user_counts = df.groupby('user_id')['user_id'].transform('size')
        item_counts = df.groupby('item_id')['item_id'].transform('size')
        keep = (user_counts >= k) & (item_counts >= k)
        if keep.all():
            break
        df = df[keep]
        rounds += 1
    log.debug('k-core k=%d rounds=%d kept=%d', k, rounds, len(df))
    return df.reset_index(drop=True)


def _sorted_by_time(df):
    # ties keep input order
    return df.assign(_pos=np.arange(len(df))).sort_values(['timestamp', '_pos'], kind='mergesort')


def temporal_split(records, train_fraction=0.8):
    """Global temporal split at one timestamp threshold.

    The threshold is the empirical `train_fraction`-quantile of the
    timestamps: the timestamp found at sorted position
    ``floor(train_fraction * n)``. Interactions strictly before it form the
    training set, interactions at or after it the test set. When that
    timestamp is also the earliest one the next later distinct timestamp is
    used so that both sides are non-empty.

    Parameters
    ----------
    records : DataFrame or iterable of InteractionRecord
    train_fraction : float, in (0, 1)

    Returns
    -------
    split : SplitDataset
        `train` and `test` frames in input order and the integer threshold.
    """
    if not 0 < train_fraction < 1:
        raise ValueError('train_fraction must be in (0, 1), got {0}'.format(train_fraction))
    df = interactions_frame(records)
    if not len(df):
        raise ValueError('cannot split an empty interaction log')
    ts = np.sort(df['timestamp'].values, kind='mergesort')
    if ts[0] == ts[-1]:
        raise UnsplittableError('all {0} timestamps are identical ({1}); no valid threshold'
                                .format(len(ts), ts[0]))
    cut = min(max(int(math.floor(train_fraction * len(ts))), 1), len(ts) - 1)
    threshold = ts[cut]
    if threshold == ts[0]:
        threshold = ts[ts > ts[0]][0]
    before = df['timestamp'] < threshold
    return SplitDataset(df[before].reset_index(drop=True),
                        df[~before].reset_index(drop=True),
                        int(threshold))


def validation_split(split, fraction=0.9):
    """Carve a validation set out of `split.train` with a second temporal split."""
    return temporal_split(split.train, fraction)


def build_catalog(records, metadata=None):
    """Build the Catalog for the items referenced by `records`.

    Item ids are sorted before indexing, so the dense index depends only on
    the set of ids. Items without a metadata entry get an empty ItemMeta.
    """
    df = interactions_frame(records)
    item_ids = sorted(df['item_id'].unique().tolist())
    metadata = metadata or {}
    missing = [i for i in item_ids if i not in metadata]
    if metadata and missing:
        log.warning('items without metadata count=%d first=%s', len(missing), missing[:5])
    items = dict((i, metadata.get(i, ItemMeta())) for i in item_ids)
    item_index = dict((item_id, n) for n, item_id in enumerate(item_ids, 1))
    return Catalog(items, item_ids, item_index, int(df['user_id'].nunique()))


def encode_items(item_ids, catalog):
    """Dense indices of `item_ids`; unknown ids raise KeyError."""
    missing = [i for i in item_ids if i not in catalog.item_index]
    if missing:
        raise KeyError('items missing from the catalog: {0}'.format(missing[:5]))
    return [catalog.item_index[i] for i in item_ids]


def build_sequences(split, max_len, catalog=None):
    """One chronological sequence per user present in `split.train`.

    Parameters
    ----------
    split : SplitDataset
    max_len : int
        Only the most recent `max_len` interactions are kept.
    catalog : Catalog (optional)
        Provides the dense item index. When omitted, the index is built from
        the ids of `split.train` and `split.test`, which matches the index of
        a catalog built from the same records.

    Returns
    -------
    sequences : list of UserSequence, ordered by user_id
    """
    if max_len < 1:
        raise ValueError('max_len must be positive')
    if not len(split.train):
        raise ValueError('split.train is empty')
    if catalog is None:
        catalog = build_catalog(pd.concat([split.train, split.test]))
    df = _sorted_by_time(interactions_frame(split.train))
    df['index'] = df['item_id'].map(catalog.item_index)
    if df['index'].isnull().any():
        unknown = df.loc[df['index'].isnull(), 'item_id'].unique().tolist()
        raise KeyError('items missing from the catalog: {0}'.format(unknown[:5]))
    has_ratings = df['rating'].notnull().any()
    sequences = []
    for user_id, group in df.groupby('user_id', sort=True):
        group = group.tail(max_len)
        ratings = None
        if has_ratings:
            ratings = [None if pd.isnull(r) else float(r) for r in group['rating']]
        sequences.append(UserSequence(user_id, group['index'].astype(int).tolist(),
                                      group['timestamp'].astype(int).tolist(), ratings))
    return sequences


def dataset_stats(records):
    """Users, items, interactions, average sequence length and density."""
    df = interactions_frame(records)
    if not len(df):
        raise ValueError('records must be non-empty')
    return DatasetStats.from_counts(df['user_id'].nunique(), df['item_id'].nunique(), len(df))


def load_interactions(path, columns=None, delimiter='\t', max_malformed=0.01):
    """Read a delimiter-separated interaction log.

    Parameters
    ----------
    path : string
    columns : dict (optional)
        Maps `user_id`, `item_id`, `timestamp` and optionally `rating` onto
        header names of the file. Defaults to the canonical names.
    delimiter : string, default tab
    max_malformed : float
        Fraction of malformed rows tolerated; malformed rows are dropped and
        reported with their line numbers.

    Returns
    -------
    interactions : DataFrame in the canonical layout
    """
    columns = dict(columns or {})
    for name in ('user_id', 'item_id', 'timestamp'):
        columns.setdefault(name, name)
    raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    missing = [columns[c] for c in ('user_id', 'item_id', 'timestamp') if columns[c] not in raw.columns]
    if columns.get('rating') and columns['rating'] not in raw.columns:
        missing.append(columns['rating'])
    if missing:
        raise ConfigError(['column "{0}" not found in {1} (available: {2})'
                           .format(c, path, ', '.join(raw.columns)) for c in missing])

    df = pd.DataFrame({'user_id': raw[columns['user_id']].str.strip(),
                       'item_id': raw[columns['item_id']].str.strip()})
    ts = pd.to_numeric(raw[columns['timestamp']], errors='coerce')
    bad = (df['user_id'] == '') | (df['item_id'] == '') | ts.isnull() | (ts < 0)
    bad |= ts.notnull() & (ts != np.floor(ts))
    if columns.get('rating'):
        rating_raw = raw[columns['rating']].str.strip()
        rating = pd.to_numeric(rating_raw, errors='coerce')
        bad |= (rating_raw != '') & rating.isnull()
    else:
        rating = pd.Series(np.nan, index=raw.index)

    if bad.any():
        # header is line 1
        lines = (np.flatnonzero(bad.values) + 2).tolist()
        frac = len(lines) / float(len(raw))
        log.warning('malformed rows path=%s count=%d fraction=%.4f lines=%s',
                    path, len(lines), frac, lines[:20])
        if frac > max_malformed:
            raise ConfigError('{0}: {1} of {2} rows malformed (limit {3:.1%}); first bad lines: {4}'
                              .format(path, len(lines), len(raw), max_malformed, lines[:20]))
    keep = ~bad
    out = pd.DataFrame({'user_id': df['user_id'][keep],
                        'item_id': df['item_id'][keep],
                        'timestamp': ts[keep].astype(np.int64),
                        'rating': rating[keep]})
    return out.reset_index(drop=True)


def load_item_metadata(path, id_column='item_id', fields=None, delimiter='\t'):
    """Read item metadata keyed by item id; empty cells become None."""
    fields = fields or {}
    raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    if id_column not in raw.columns:
        raise ConfigError('column "{0}" not found in {1}'.format(id_column, path))
    source = dict((f, fields.get(f, f)) for f in ITEM_FIELDS)
    meta = {}
    for row in raw.to_dict(orient='records'):
        values = dict((f, (row.get(col) or '').strip() or None) for f, col in source.items())
        meta[row[id_column].strip()] = ItemMeta(**values)
    return meta


def write_sequences(sequences, path):
    """One user per line: user_id, item indices, timestamps (and ratings when known)."""
    with open(path, 'w', encoding='utf-8') as f:
        for s in sequences:
            cols = [str(s.user_id), ','.join(map(str, s.items)), ','.join(map(str, s.timestamps))]
            if s.ratings is not None:
                cols.append(','.join('' if r is None else repr(r) for r in s.ratings))
            f.write('\t'.join(cols) + '\n')


def read_sequences(path):
    sequences = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            cols = line.rstrip('\n').split('\t')
            if not cols[0]:
                continue
            ratings = None
            if len(cols) > 3:
                ratings = [float(r) if r else None for r in cols[3].split(',')]
            sequences.append(UserSequence(cols[0], [int(x) for x in cols[1].split(',')],
                                          [int(x) for x in cols[2].split(',')], ratings))
    return sequences


def write_catalog(catalog, path):
    rows = [dict(item_id=i, index=catalog.item_index[i], **catalog.items[i]._asdict())
            for i in catalog.item_ids]
    pd.DataFrame(rows, columns=['item_id', 'index'] + ITEM_FIELDS).to_csv(path, sep='\t', index=False)


def read_catalog(path, num_users):
    raw = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False).sort_values(
        'index', key=lambda s: s.astype(int))
    items = {}
    for row in raw.to_dict(orient='records'):
        items[row['item_id']] = ItemMeta(**dict((f, row[f] or None) for f in ITEM_FIELDS))
    item_ids = raw['item_id'].tolist()
    item_index = dict((i, n) for n, i in enumerate(item_ids, 1))
    return Catalog(items, item_ids, item_index, int(num_users))


def write_split(split, directory):
    split.train.to_csv(os.path.join(directory, 'train.tsv'), sep='\t', index=False)
    split.test.to_csv(os.path.join(directory, 'test.tsv'), sep='\t', index=False)


def read_split(directory, threshold=None):

    def read(name):
        df = pd.read_csv(os.path.join(directory, name), sep='\t',
                         dtype={'user_id': str, 'item_id': str})
        return interactions_frame(df)
    return SplitDataset(read('train.tsv'), read('test.tsv'), threshold)
