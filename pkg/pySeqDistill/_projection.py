"""
pySeqDistill Projection
=======================
Reduce profile embeddings to the recommender's hidden size and persist the
frozen distillation targets.

* `fit_projection` / `project` - umap (default), pca or identity
* `write_targets` / `read_targets` - float32 matrix, index and digest files
* `cluster_targets` - noisy cluster centroids for synthetic experiments
"""

from collections import namedtuple
import logging
import os

import joblib
import numpy as np
import pandas as pd

from .utils import ArtifactError, sha256_bytes
try:
    from sklearn.decomposition import PCA
    sklearn_present = True
except ImportError:
    sklearn_present = False

log = logging.getLogger(__name__)

UMAP_DEFAULTS = {'n_neighbors': 15, 'min_dist': 0.1, 'metric': 'cosine'}
METHODS = ('umap', 'pca', 'identity')


class ProjectionModel(namedtuple('ProjectionModel', ['method', 'input_dim', 'output_dim', 'seed',
                                                     'fitted_params'])):
    """A fitted map from encoder space (`input_dim`) to the recommender's
    hidden space (`output_dim`). `fitted_params` holds the estimator and,
    for umap, the embedding of the fit data."""
    __slots__ = ()


class ProfileTarget(namedtuple('ProfileTarget', ['user_id', 'vector', 'frozen'])):
    __slots__ = ()


def _matrix_digest(x):
    return sha256_bytes(np.ascontiguousarray(x, dtype='<f8').tobytes())


def _fit_identity(x, d, seed, **kwargs):
    if x.shape[1] != d:
        raise ValueError('identity projection needs input_dim == d ({0} != {1})'.format(x.shape[1], d))
    return {}


def _fit_pca(x, d, seed, **kwargs):
    if not sklearn_present:
        raise ImportError('the pca projection needs scikit-learn')
    if x.shape[0] <= d:
        raise ValueError('pca needs more rows than d ({0} <= {1})'.format(x.shape[0], d))
    pca = PCA(n_components=d, svd_solver='full', random_state=seed)
    pca.fit(x)
    return {'estimator': pca}


def _fit_umap(x, d, seed, n_neighbors=15, min_dist=0.1, metric='cosine', **kwargs):
    import umap
    minimum = max(n_neighbors + 1, d + 2)
    if x.shape[0] < minimum:
        raise ValueError('umap with n_neighbors={0} and d={1} needs at least {2} rows, got {3}'
                         .format(n_neighbors, d, minimum, x.shape[0]))
    reducer = umap.UMAP(n_components=d, n_neighbors=n_neighbors, min_dist=min_dist, metric=metric,
                        random_state=seed, **kwargs)
    embedding = reducer.fit_transform(x)
    return {'estimator': reducer, 'fit_digest': _matrix_digest(x), 'fit_embedding': embedding}


_REDUCERS = {'umap': _fit_umap, 'pca': _fit_pca, 'identity': _fit_identity}


def fit_projection(embeddings, d, method='umap', seed=0, **kwargs):
    """Fit the projection into a `d`-dimensional space.

    Parameters
    ----------
    embeddings : array-like, shape (`n`, `input_dim`)
    d : int
        Hidden size of the recommender.
    method : string
        `umap` (or upper case variant), `pca` or `identity`.
    seed : int
    **kwargs
        Passed on to the reducer, e.g. `n_neighbors`, `min_dist`, `metric`.

    Returns
    -------
    model : ProjectionModel
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or not len(x):
        raise ValueError('embeddings must be a non-empty 2-d array')
    if not np.all(np.isfinite(x)):
        raise ValueError('embeddings contain non-finite values')
    method = method.lower()
    if method not in _REDUCERS:
        raise ValueError('unknown projection `{0}`, expected one of {1}'.format(method, METHODS))
    if d < 1:
        raise ValueError('d must be positive')
    if method != 'identity' and d >= x.shape[1]:
        raise ValueError('{0} needs d < input_dim ({1} >= {2})'.format(method, d, x.shape[1]))
    if method == 'umap':
        kwargs = dict(UMAP_DEFAULTS, **kwargs)
    params = _REDUCERS[method](x, d, seed, **kwargs)
    log.info('fitted projection method=%s rows=%d input_dim=%d d=%d seed=%d',
             method, x.shape[0], x.shape[1], d, seed)
    return ProjectionModel(method, x.shape[1], int(d), int(seed), params)


def transform(model, embeddings):
    """Apply a fitted projection to raw embeddings, returning a float32 matrix."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError('expected embeddings with {0} columns, got shape {1}'
                         .format(model.input_dim, x.shape))
    if model.method == 'identity':
        out = x
    elif model.method == 'pca':
        out = model.fitted_params['estimator'].transform(x)
    elif model.fitted_params.get('fit_digest') == _matrix_digest(x):
        # umap's transform of its own fit data is not its fitted embedding
        out = model.fitted_params['fit_embedding']
    else:
        out = model.fitted_params['estimator'].transform(x)
    return np.ascontiguousarray(out, dtype=np.float32)


def _frozen(vector):
    vector = np.array(vector, dtype=np.float32)
    vector.setflags(write=False)
    return vector


def project(model, embeddings, user_ids):
    """Frozen ProfileTargets for `user_ids`, row i of `embeddings` belonging to `user_ids[i]`."""
    if len(user_ids) != len(embeddings):
        raise ValueError('{0} user ids for {1} embeddings'.format(len(user_ids), len(embeddings)))
    out = transform(model, embeddings)
    return [ProfileTarget(u, _frozen(v), True) for u, v in zip(user_ids, out)]


def save_projection(model, path):
    joblib.dump(model._asdict(), path)


def load_projection(path):
    return ProjectionModel(**joblib.load(path))


class TargetStore(object):
    """Read-only lookup of frozen target vectors by user id."""

    def __init__(self, user_ids, matrix, digest):
        self.user_ids = list(user_ids)
        self.matrix = matrix
        self.digest = digest
        self._row = dict((u, i) for i, u in enumerate(self.user_ids))

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.user_ids)

    def __contains__(self, user_id):
        return user_id in self._row

    def get(self, user_id, default=None):
        row = self._row.get(user_id)
        return default if row is None else self.matrix[row]


def _target_paths(prefix):
    return prefix + '.f32', prefix + '.index.tsv', prefix + '.sha256'


def _store_digest(matrix_bytes, index_bytes):
    return sha256_bytes(matrix_bytes + b'\n' + index_bytes)


def write_targets(targets, prefix):
    """Persist targets as ``<prefix>.f32`` (little-endian float32, row major),
    ``<prefix>.index.tsv`` (user_id, row) and ``<prefix>.sha256``.

    Returns
    -------
    digest : string
    """
    if not targets:
        raise ValueError('no targets to write')
    dims = set(len(t.vector) for t in targets)
    if len(dims) != 1:
        raise ValueError('targets have mixed dimensions {0}'.format(sorted(dims)))
    matrix = np.vstack([t.vector for t in targets]).astype('<f4')
    matrix_path, index_path, digest_path = _target_paths(prefix)
    matrix_bytes = matrix.tobytes()
    index = pd.DataFrame({'user_id': [t.user_id for t in targets], 'row': np.arange(len(targets))})
    index_bytes = index.to_csv(sep='\t', index=False).encode('utf-8')
    with open(matrix_path, 'wb') as f:
        f.write(matrix_bytes)
    with open(index_path, 'wb') as f:
        f.write(index_bytes)
    digest = _store_digest(matrix_bytes, index_bytes)
    with open(digest_path, 'w') as f:
        f.write(digest + '\n')
    log.info('wrote targets count=%d d=%d digest=%s', len(targets), matrix.shape[1], digest[:12])
    return digest


def targets_digest(prefix):
    """Recompute the digest of a stored target set from its files."""
    matrix_path, index_path, _ = _target_paths(prefix)
    with open(matrix_path, 'rb') as f:
        matrix_bytes = f.read()
    with open(index_path, 'rb') as f:
        index_bytes = f.read()
    return _store_digest(matrix_bytes, index_bytes)


def read_targets(prefix):
    """Load a target set written by :func:`write_targets`, verifying its digest.

    Returns
    -------
    store : TargetStore
        Its matrix is read-only.
    """
    matrix_path, index_path, digest_path = _target_paths(prefix)
    for p in (matrix_path, index_path, digest_path):
        if not os.path.exists(p):
            raise ArtifactError('missing target file {0}'.format(p), hint='run `pySeqDistill profile`')
    with open(digest_path) as f:
        expected = f.read().strip()
    actual = targets_digest(prefix)
    if actual != expected:
        raise ArtifactError('target store {0} does not match its digest'.format(prefix),
                            hint='rerun `pySeqDistill profile`')
    index = pd.read_csv(index_path, sep='\t', dtype={'user_id': str})
    with open(matrix_path, 'rb') as f:
        flat = np.frombuffer(f.read(), dtype='<f4')
    matrix = flat.reshape(len(index), -1)
    return TargetStore(index['user_id'].tolist(), matrix, actual)


def cluster_targets(user_clusters, d, sigma=0.1, seed=0):
    """Synthetic targets: a standard-normal centroid per cluster plus
    N(0, sigma^2) noise per user.

    Parameters
    ----------
    user_clusters : dict
        user_id -> cluster label.
    d : int
    sigma : float
    seed : int

    Returns
    -------
    targets : list of ProfileTarget, ordered by user_id
    """
    rng = np.random.default_rng(seed)
    labels = sorted(set(user_clusters.values()))
    centroids = dict((c, rng.standard_normal(d)) for c in labels)
    out = []
    for user_id in sorted(user_clusters):
        v = centroids[user_clusters[user_id]] + sigma * rng.standard_normal(d)
        out.append(ProfileTarget(user_id, _frozen(v), True))
    return out
