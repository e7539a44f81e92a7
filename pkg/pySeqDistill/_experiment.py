"""
pySeqDistill Experiment
=======================
Configuration, artifact manifests and the pipeline commands:

* `cmd_ingest` - filter, split and sequence an interaction log
* `cmd_profile` - profile targets (LLM profiles or cluster oracle)
* `cmd_train` - one baseline or distilled run for one seed
* `cmd_evaluate` - per-seed metrics, aggregates and the uplift table
* `cmd_ablate` - the alpha x beta grid
* `cmd_grid` - hyperparameter grid on the validation split
* `cmd_all` - everything above for the configured seeds
"""

import copy
import datetime
import itertools
import logging
import os
import re

import funcy as fp
import pandas as pd
import yaml
from joblib import Parallel, delayed

from ._distill import DistillationConfig, LossTrajectory, TrainingConfig, two_phase_train
from ._evaluate import (MetricReport, aggregate_seeds, evaluate, render_ablation, render_table, render_text,
                        trajectory_frame, uplift)
from ._ingest import (build_catalog, build_sequences, dataset_stats, k_core_filter, load_interactions,
                      load_item_metadata, read_catalog, read_sequences, read_split, temporal_split,
                      validation_split, write_catalog, write_sequences, write_split)
from ._models import ARCHITECTURES, ModelConfig, PoolingConfig, build_model, load_checkpoint
from ._profiles import ProfileCache, build_prompts, default_template, encode_profiles, generate_profiles
from ._projection import (METHODS, cluster_targets, fit_projection, project, read_targets, save_projection,
                          write_targets)
from .clients import (ChatCompletionClient, EmbeddingEndpointEncoder, LocalTransformerEncoder, MockLLMClient,
                      MockTextEncoder)
from .toy import make_toy_dataset, read_user_clusters
from .utils import (ArtifactError, ConfigError, ExternalServiceError, RunLock, load_json, save_json,
                    sha256_file, sha256_obj, set_seed)

log = logging.getLogger(__name__)

BASELINE = 'baseline'
DISTILLED = 'distilled'
VARIANTS = (BASELINE, DISTILLED)

DEFAULTS = {
    'dataset': 'dataset',
    'data': {
        'interactions': None,
        'items': None,
        'user_clusters': None,
        'toy': None,
        'delimiter': '\t',
        'columns': {'user_id': 'user_id', 'item_id': 'item_id', 'timestamp': 'timestamp', 'rating': None},
        'item_id_column': 'item_id',
        'item_fields': {},
        'max_malformed': 0.01,
    },
    'split': {'k_core': 5, 'train_fraction': 0.8, 'validation_fraction': 0.9, 'max_len': 50},
    'model': {'architecture': 'causal', 'hidden_dim': 64, 'num_layers': 2, 'num_heads': 2, 'dropout': 0.2},
    'pooling': {'strategy': None, 'gamma': 0.0},
    'distillation': {'alpha': 0.4, 'use_dynamic_beta': True, 'beta_eps': 1e-8, 'distill_layer': None,
                     'phase1_fraction': 0.5},
    'training': {'epochs': 20, 'learning_rate': 0.001, 'batch_size': 128, 'grad_clip': 5.0,
                 'mask_prob': 0.2, 'last_mask_prob': 0.1},
    'grids': {
        'learning_rate': [0.0001, 0.0005, 0.001],
        'batch_size': [128, 256, 512],
        'dropout': [0.2, 0.3, 0.5],
        'num_layers': [1, 2, 4],
        'num_heads': [2, 4, 8],
        'alpha': [0.4, 0.6, 0.8],
        'use_dynamic_beta': [True, False],
        # None is the final layer
        'distill_layer': [None],
    },
    'seeds': [0, 1, 2, 3, 4],
    'projection': {'method': 'umap', 'seed': 0, 'n_neighbors': 15, 'min_dist': 0.1, 'metric': 'cosine'},
    'profiles': {'source': 'llm', 'domain_name': 'products',
                 'metadata_fields': ['title', 'categories', 'description'], 'rating_threshold': None,
                 'n_jobs': 4, 'cluster_sigma': 0.1, 'cluster_seed': 0},
    'client': {'mock': False, 'endpoint': None, 'model_id': 'gemma-2-9b-it', 'token_env': 'LLM_API_TOKEN',
               'timeout': 60, 'max_retries': 3, 'temperature': 0.0, 'max_tokens': 512},
    'encoder': {'mock': False, 'kind': 'endpoint', 'endpoint': None, 'model_id': 'multilingual-e5-large',
                'output_dim': 1024, 'token_env': 'ENCODER_API_TOKEN', 'prefix': 'passage: ', 'batch_size': 32},
    'evaluation': {'k': [10]},
    'runtime': {'out_dir': 'artifacts', 'n_jobs': 1},
}

# grid key -> config section
GRID_SECTIONS = {'learning_rate': 'training', 'batch_size': 'training', 'dropout': 'model',
                 'num_layers': 'model', 'num_heads': 'model'}
SECRET_SECTIONS = ('client', 'encoder')
_ENV = re.compile(r'\$\{(\w+)\}')


def deep_merge(base, override):
    """Recursively merge dicts; values of `override` win."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _interpolate(value):
    if isinstance(value, dict):
        return fp.walk_values(_interpolate, value)
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    if isinstance(value, str):
        def env(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError('environment variable {0} is not set'.format(name))
            return os.environ[name]
        return _ENV.sub(env, value)
    return value


class ExperimentConfig(object):
    """Resolved experiment configuration.

    Parameters
    ----------
    user : dict
        The user's (partial) configuration, merged over `DEFAULTS`.
    base_dir : string
        Relative paths in `data` and `runtime.out_dir` are resolved against it.
    """

    def __init__(self, user, base_dir='.'):
        self.user = copy.deepcopy(user or {})
        self.base_dir = os.path.abspath(base_dir)
        merged = deep_merge(DEFAULTS, self.user)
        for section in SECRET_SECTIONS:
            merged[section] = _interpolate(merged[section])
        self.data = merged
        self._validate()

    def __getitem__(self, section):
        return self.data[section]

    def _validate(self):
        errors = []
        if not fp.get_in(self.user, ['pooling', 'strategy']):
            errors.append('pooling.strategy is required (mean or exp)')
        for name, values in self['grids'].items():
            if not values:
                errors.append('grid {0} is empty'.format(name))
        seeds = self['seeds']
        if not seeds:
            errors.append('seeds must be non-empty')
        elif len(set(seeds)) != len(seeds):
            errors.append('seeds must be distinct, got {0}'.format(seeds))
        if self['model']['architecture'] not in ARCHITECTURES:
            errors.append('model.architecture must be one of {0}'.format(ARCHITECTURES))
        if self['projection']['method'].lower() not in METHODS:
            errors.append('projection.method must be one of {0}'.format(METHODS))
        num_layers = self['model']['num_layers']
        bad = [k for k in self['grids']['distill_layer'] if k is not None and not 1 <= k <= num_layers]
        if bad:
            errors.append('grid distill_layer values {0} outside 1..{1}'.format(bad, num_layers))
        if self['profiles']['source'] not in ('llm', 'clusters'):
            errors.append("profiles.source must be 'llm' or 'clusters'")
        data = self['data']
        if self['profiles']['source'] == 'clusters' and not data['user_clusters'] and data['toy'] is None:
            errors.append('profiles.source clusters needs data.user_clusters')
        if errors:
            raise ConfigError(errors)
        try:
            self.model_config(1)
            self.pooling_config()
            self.distillation_config(DISTILLED)
        except ValueError as e:
            raise ConfigError(str(e).strip())

    @property
    def dataset(self):
        return self['dataset']

    @property
    def seeds(self):
        return list(self['seeds'])

    @property
    def out_dir(self):
        return os.path.join(self.base_dir, self['runtime']['out_dir'])

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def data_path(self, key):
        toy = self['data']['toy']
        value = self['data'][key]
        if value is None and toy is not None:
            return self.path('toy', key + '.tsv')
        return None if value is None else os.path.join(self.base_dir, value)

    def digest(self, sections=None):
        """sha256 of the canonical JSON of `sections` (everything but secrets
        and output locations by default), before environment interpolation."""
        merged = deep_merge(DEFAULTS, self.user)
        merged.pop('runtime')
        for section in SECRET_SECTIONS:
            merged[section] = fp.omit(merged[section], ['token_env', 'endpoint', 'timeout', 'max_retries'])
        if sections is not None:
            merged = fp.project(merged, sections)
        return sha256_obj(merged)

    def with_overrides(self, overrides):
        return ExperimentConfig(deep_merge(self.user, overrides), self.base_dir)

    def model_config(self, num_items):
        m = self['model']
        return ModelConfig(m['architecture'], num_items, m['hidden_dim'], m['num_layers'], m['num_heads'],
                           m['dropout'], self['split']['max_len'])

    def pooling_config(self):
        return PoolingConfig(self['pooling']['strategy'] or 'mean', self['pooling']['gamma'])

    def distillation_config(self, variant):
        d = self['distillation']
        phase1 = d['phase1_fraction'] if variant == DISTILLED else 0.0
        return DistillationConfig(d['alpha'], d['use_dynamic_beta'], d['beta_eps'], d['distill_layer'],
                                  self.pooling_config(), phase1, self['training']['epochs'])

    def training_config(self):
        t = self['training']
        return TrainingConfig(t['learning_rate'], t['batch_size'], t['grad_clip'], t['mask_prob'],
                              t['last_mask_prob'])


def load_config(path, overrides=None):
    """Read a YAML config file; relative paths resolve against its directory."""
    if not os.path.exists(path):
        raise ConfigError('config file {0} not found'.format(path))
    with open(path) as f:
        try:
            user = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError('cannot parse {0}: {1}'.format(path, e))
    if not isinstance(user, dict):
        raise ConfigError('{0} must hold a mapping of sections'.format(path))
    return ExperimentConfig(deep_merge(user, overrides or {}), os.path.dirname(os.path.abspath(path)))


# manifests

def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _code_version():
    from . import __version__
    return __version__


def file_digests(directory, names):
    return dict((name, sha256_file(os.path.join(directory, name))) for name in names)


def new_manifest(stage, digest, config_digest, seed=None, inputs=None):
    return {'stage': stage, 'digest': digest, 'config_digest': config_digest, 'code_version': _code_version(),
            'seed': seed, 'started_at': _now(), 'finished_at': None, 'complete': False,
            'inputs': inputs or {}, 'outputs': {}}


def finish_manifest(manifest, directory, output_names, complete=True, **extra):
    manifest = dict(manifest, **extra)
    manifest['outputs'] = file_digests(directory, output_names)
    manifest['finished_at'] = _now()
    manifest['complete'] = complete
    save_json(manifest, os.path.join(directory, 'manifest.json'))
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, 'manifest.json')
    return load_json(path) if os.path.exists(path) else None


def verify_outputs(manifest, directory):
    """True when every output recorded in `manifest` still has its digest."""
    for name, digest in manifest['outputs'].items():
        path = os.path.join(directory, name)
        if not os.path.exists(path) or sha256_file(path) != digest:
            return False
    return True


def _is_current(directory, digest):
    manifest = read_manifest(directory)
    return (manifest is not None and manifest.get('complete') and manifest['digest'] == digest
            and verify_outputs(manifest, directory))


# ingest

INGEST_OUTPUTS = ['train.tsv', 'test.tsv', 'items.tsv', 'sequences.tsv', 'stats.json',
                  'valid/train.tsv', 'valid/test.tsv', 'valid/sequences.tsv']


class IngestArtifacts(object):
    """Loaded ingest outputs. `stage` 'test' gives the train/test split,
    'valid' the inner train/validation split."""

    def __init__(self, directory, manifest, stage='test'):
        self.directory = directory
        self.manifest = manifest
        self.digest = manifest['digest']
        stats = load_json(os.path.join(directory, 'stats.json'))
        self.stats = stats
        self.catalog = read_catalog(os.path.join(directory, 'items.tsv'), stats['filtered']['num_users'])
        split_dir = directory if stage == 'test' else os.path.join(directory, 'valid')
        self.split = read_split(split_dir)
        self.sequences = read_sequences(os.path.join(split_dir, 'sequences.tsv'))

    def histories(self):
        """user_id -> every item index in the user's training period."""
        index = self.split.train['item_id'].map(self.catalog.item_index)
        frame = pd.DataFrame({'user_id': self.split.train['user_id'], 'index': index}).dropna()
        return dict((u, set(int(i) for i in g['index'])) for u, g in frame.groupby('user_id'))


def _ensure_toy(config):
    toy = config['data']['toy']
    if toy is None:
        return
    paths = [config.data_path(k) for k in ('interactions', 'items', 'user_clusters')]
    if not all(os.path.exists(p) for p in paths):
        make_toy_dataset(os.path.dirname(paths[0]), **(toy or {}))


def cmd_ingest(config):
    """Filter, split and sequence the interaction log.

    Returns
    -------
    result : dict
        `status` ('written' or 'up-to-date'), `directory` and `stats`.
    """
    _ensure_toy(config)
    data = config['data']
    interactions = config.data_path('interactions')
    if not interactions or not os.path.exists(interactions):
        raise ConfigError('data.interactions file not found: {0}'.format(interactions))
    items_path = config.data_path('items')
    inputs = {'interactions': sha256_file(interactions)}
    if items_path:
        inputs['items'] = sha256_file(items_path)
    digest = sha256_obj({'config': config.digest(['dataset', 'data', 'split']), 'inputs': inputs})
    out = config.path('ingest')
    if _is_current(out, digest):
        log.info('ingest up-to-date dir=%s', out)
        return {'status': 'up-to-date', 'directory': out, 'stats': load_json(os.path.join(out, 'stats.json'))}

    split_conf = config['split']
    records = load_interactions(interactions, data['columns'], data['delimiter'], data['max_malformed'])
    if not len(records):
        raise ConfigError('{0} holds no usable interactions'.format(interactions))
    metadata = None
    if items_path:
        metadata = load_item_metadata(items_path, data['item_id_column'], data['item_fields'], data['delimiter'])
    filtered = k_core_filter(records, split_conf['k_core'])
    if not len(filtered):
        raise ConfigError('nothing survives {0}-core filtering'.format(split_conf['k_core']))
    split = temporal_split(filtered, split_conf['train_fraction'])
    catalog = build_catalog(filtered, metadata)
    sequences = build_sequences(split, split_conf['max_len'], catalog)
    inner = validation_split(split, split_conf['validation_fraction'])
    inner_sequences = build_sequences(inner, split_conf['max_len'], catalog)

    manifest = new_manifest('ingest', digest, config.digest(), inputs=inputs)
    valid_dir = os.path.join(out, 'valid')
    if not os.path.isdir(valid_dir):
        os.makedirs(valid_dir)
    write_split(split, out)
    write_split(inner, valid_dir)
    write_catalog(catalog, os.path.join(out, 'items.tsv'))
    write_sequences(sequences, os.path.join(out, 'sequences.tsv'))
    write_sequences(inner_sequences, os.path.join(valid_dir, 'sequences.tsv'))
    stats = {'raw': dataset_stats(records).to_dict(),
             'filtered': dataset_stats(filtered).to_dict(),
             'threshold': split.threshold,
             'validation_threshold': inner.threshold,
             'num_train': len(split.train), 'num_test': len(split.test),
             'num_sequences': len(sequences)}
    save_json(stats, os.path.join(out, 'stats.json'))
    finish_manifest(manifest, out, INGEST_OUTPUTS)
    log.info('ingest written dir=%s users=%d items=%d interactions=%d threshold=%d',
             out, stats['filtered']['num_users'], stats['filtered']['num_items'],
             stats['filtered']['num_interactions'], split.threshold)
    return {'status': 'written', 'directory': out, 'stats': stats}


def load_ingest(config, stage='test'):
    out = config.path('ingest')
    manifest = read_manifest(out)
    if manifest is None or not manifest.get('complete'):
        raise ArtifactError('no ingest artifacts in {0}'.format(out), hint='run `pySeqDistill ingest`')
    if not verify_outputs(manifest, out):
        raise ArtifactError('ingest artifacts in {0} were modified'.format(out), hint='rerun `pySeqDistill ingest`')
    return IngestArtifacts(out, manifest, stage)


# profiles

TARGETS_PREFIX = 'targets'
TARGET_OUTPUTS = ['targets.f32', 'targets.index.tsv', 'targets.sha256']


def make_client(config):
    c = config['client']
    if c['mock']:
        return MockLLMClient()
    if not c['endpoint']:
        raise ConfigError('client.endpoint is required unless client.mock is set')
    return ChatCompletionClient(c['endpoint'], c['model_id'], c['token_env'], c['timeout'], c['max_retries'],
                                temperature=c['temperature'], max_tokens=c['max_tokens'])


def make_encoder(config):
    e = config['encoder']
    if e['mock']:
        return MockTextEncoder(e['output_dim'])
    if e['kind'] == 'local':
        return LocalTransformerEncoder(e['model_id'], e['output_dim'], e['prefix'])
    if not e['endpoint']:
        raise ConfigError('encoder.endpoint is required unless encoder.mock is set or encoder.kind is local')
    return EmbeddingEndpointEncoder(e['endpoint'], e['model_id'], e['output_dim'], e['token_env'], e['prefix'])


def _profile_digest(config, ingest_digest):
    sections = ['profiles']
    if config['profiles']['source'] == 'llm':
        sections += ['projection', 'client', 'encoder']
    return sha256_obj({'ingest': ingest_digest, 'config': config.digest(sections),
                       'hidden_dim': config['model']['hidden_dim']})


def _check_dimensions(config):
    d = config['model']['hidden_dim']
    method = config['projection']['method'].lower()
    dim = config['encoder']['output_dim']
    if method == 'identity' and dim != d:
        raise ConfigError('identity projection needs encoder.output_dim ({0}) == model.hidden_dim ({1})'
                          .format(dim, d))
    if method != 'identity' and d >= dim:
        raise ConfigError('{0} projection needs model.hidden_dim ({1}) < encoder.output_dim ({2})'
                          .format(method, d, dim))


def cmd_profile(config, client=None, encoder=None):
    """Produce the frozen target store.

    Parameters
    ----------
    config : ExperimentConfig
    client : LLMClient (optional)
        Overrides the client built from `config`.
    encoder : TextEncoderHandle (optional)

    Returns
    -------
    result : dict
        `status`, `directory`, target `digest` and `failures`.
    """
    ingest = load_ingest(config)
    d = config['model']['hidden_dim']
    prof = config['profiles']
    digest = _profile_digest(config, ingest.digest)
    out = config.path('profiles')
    if _is_current(out, digest):
        manifest = read_manifest(out)
        log.info('profiles up-to-date dir=%s', out)
        return {'status': 'up-to-date', 'directory': out, 'digest': manifest['targets_digest'], 'failures': []}
    if not os.path.isdir(out):
        os.makedirs(out)
    manifest = new_manifest('profile', digest, config.digest(), inputs={'ingest': ingest.digest})
    users = [s.user_id for s in ingest.sequences]
    outputs = list(TARGET_OUTPUTS)
    failures = []

    if prof['source'] == 'clusters':
        path = config.data_path('user_clusters')
        if not path or not os.path.exists(path):
            raise ConfigError('data.user_clusters file not found: {0}'.format(path))
        clusters = read_user_clusters(path)
        missing = [u for u in users if u not in clusters]
        if missing:
            log.warning('users without a cluster count=%d', len(missing))
        targets = cluster_targets(dict((u, clusters[u]) for u in users if u in clusters), d,
                                  prof['cluster_sigma'], prof['cluster_seed'])
    else:
        _check_dimensions(config)
        client = client or make_client(config)
        encoder = encoder or make_encoder(config)
        if encoder.output_dim != config['encoder']['output_dim']:
            raise ConfigError('encoder produces {0}-d vectors, config says {1}'
                              .format(encoder.output_dim, config['encoder']['output_dim']))
        template = default_template(prof['domain_name'], prof['metadata_fields'], prof['rating_threshold'])
        prompts = build_prompts(ingest.sequences, ingest.catalog, template)
        cache = ProfileCache(os.path.join(out, 'profiles.jsonl'))
        profiles = generate_profiles(prompts, client, cache, prof['n_jobs'])
        failures = sorted(set(users) - set(p.user_id for p in profiles))
        if not profiles:
            raise ExternalServiceError('no profile could be generated ({0} failures)'.format(len(failures)))
        encoded = encode_profiles(profiles, encoder, config['encoder']['batch_size'])
        failures = sorted(set(failures) | set(encoded.skipped))
        proj = config['projection']
        options = fp.omit(proj, ['method', 'seed']) if proj['method'].lower() == 'umap' else {}
        # every sequence user is a training-period user
        model = fit_projection(encoded.matrix, d, proj['method'], proj['seed'], **options)
        targets = project(model, encoded.matrix, encoded.user_ids)
        save_projection(model, os.path.join(out, 'projection.joblib'))
        outputs.append('profiles.jsonl')

    target_digest = write_targets(targets, os.path.join(out, TARGETS_PREFIX))
    if failures:
        log.warning('targets missing for users count=%d of=%d; rerun profile to retry', len(failures), len(users))
    finish_manifest(manifest, out, outputs, complete=not failures, targets_digest=target_digest,
                    failures=failures, num_targets=len(targets))
    return {'status': 'written', 'directory': out, 'digest': target_digest, 'failures': failures}


def load_targets(config, required=True):
    """The target store written by `cmd_profile`, or None when absent and not required."""
    out = config.path('profiles')
    manifest = read_manifest(out)
    if manifest is None:
        if required:
            raise ArtifactError('no profile targets in {0}'.format(out), hint='run `pySeqDistill profile`')
        return None
    ingest = read_manifest(config.path('ingest'))
    if ingest is None or manifest['inputs'].get('ingest') != ingest['digest']:
        if not required:
            log.warning('ignoring stale profile targets dir=%s', out)
            return None
        raise ArtifactError('profile targets in {0} were built from other ingest artifacts'.format(out),
                            hint='rerun `pySeqDistill profile`')
    store = read_targets(os.path.join(out, TARGETS_PREFIX))
    if store.digest != manifest['targets_digest']:
        raise ArtifactError('target store digest differs from its manifest', hint='rerun `pySeqDistill profile`')
    return store


# training

def run_directory(config, variant, seed, root='runs'):
    sections = ['dataset', 'data', 'split', 'model', 'pooling', 'training', 'profiles', 'projection']
    if variant == DISTILLED:
        sections.append('distillation')
    digest = config.digest(sections)
    return config.path(root, '{0}-{1}-s{2}'.format(variant, digest[:12], seed)), digest


def _run_digest(run_digest, ingest, targets, stage='test'):
    """Key of one run: its config sections plus the ingest and target artifacts it reads."""
    return sha256_obj({'run': run_digest, 'ingest': ingest.digest, 'stage': stage,
                       'targets': targets.digest if targets is not None else None})


def cmd_train(config, variant=DISTILLED, seed=0, stage='test'):
    """Train one run and write checkpoint, trajectory and manifest.

    Parameters
    ----------
    config : ExperimentConfig
    variant : 'baseline' or 'distilled'
    seed : int
    stage : 'test' trains on the full training period, 'valid' on the inner
        split used by the grid search.

    Returns
    -------
    result : dict
        `status`, `directory`, `trajectory` (LossTrajectory) and `manifest`.
    """
    if variant not in VARIANTS:
        raise ConfigError('variant must be one of {0}, got {1!r}'.format(VARIANTS, variant))
    dconf = config.distillation_config(variant)
    ingest = load_ingest(config, stage)
    needs_targets = variant == DISTILLED and dconf.phase1_epochs > 0 and dconf.alpha > 0
    targets = load_targets(config, required=needs_targets)
    root = 'runs' if stage == 'test' else 'grid'
    run_dir, run_digest = run_directory(config, variant, seed, root)
    digest = _run_digest(run_digest, ingest, targets, stage)
    if _is_current(run_dir, digest):
        log.info('run up-to-date dir=%s', run_dir)
        return {'status': 'up-to-date', 'directory': run_dir, 'manifest': read_manifest(run_dir),
                'trajectory': LossTrajectory.read(os.path.join(run_dir, 'trajectory.jsonl'))}
    if not os.path.isdir(run_dir):
        os.makedirs(run_dir)
    inputs = {'ingest': ingest.digest}
    if targets is not None:
        inputs['targets'] = targets.digest
    with RunLock(run_dir):
        manifest = new_manifest('train', digest, config.digest(), seed, inputs)
        manifest.update({'variant': variant, 'dataset': config.dataset, 'stage': stage,
                         'model': dict(config.model_config(ingest.catalog.num_items)._asdict()),
                         'distillation': dict(dconf._asdict(), pooling=dict(dconf.pooling._asdict())),
                         'training': dict(config.training_config()._asdict())})
        set_seed(seed)
        model = build_model(config.model_config(ingest.catalog.num_items), seed)
        model, trajectory = two_phase_train(model, ingest.sequences, targets, dconf, seed,
                                            config.training_config(), checkpoint_dir=run_dir,
                                            manifest_digest=digest)
        trajectory.write(os.path.join(run_dir, 'trajectory.jsonl'))
        outputs = ['checkpoint.pt', 'trajectory.jsonl']
        if dconf.phase1_epochs > 0:
            outputs.append('checkpoint_phase1.pt')
        manifest = finish_manifest(manifest, run_dir, outputs, transition=trajectory.transition)
    if targets is not None:
        store = load_targets(config)
        if store.digest != targets.digest:
            raise ArtifactError('target store changed during training')
    log.info('run written dir=%s variant=%s seed=%d', run_dir, variant, seed)
    return {'status': 'written', 'directory': run_dir, 'manifest': manifest, 'trajectory': trajectory}


# evaluation

def evaluate_run(config, run_dir, ingest=None):
    """Evaluate one finished run and store its ``metrics.json``."""
    manifest = read_manifest(run_dir)
    if manifest is None or not manifest.get('complete'):
        raise ArtifactError('run {0} is missing or unfinished'.format(run_dir), hint='run `pySeqDistill train`')
    if not verify_outputs(manifest, run_dir):
        raise ArtifactError('run {0} was modified after completion'.format(run_dir),
                            hint='delete it and rerun `pySeqDistill train`')
    ingest = ingest or load_ingest(config, manifest.get('stage', 'test'))
    if ingest.digest != manifest['inputs']['ingest']:
        raise ArtifactError('run {0} was trained on other ingest artifacts'.format(run_dir),
                            hint='rerun `pySeqDistill train`')
    model, _ = load_checkpoint(os.path.join(run_dir, 'checkpoint.pt'))
    report = evaluate(model, ingest.split.test, ingest.sequences, ingest.catalog, config['evaluation']['k'],
                      ingest.histories(), config.dataset, manifest['variant'], manifest['seed'], manifest['digest'])
    save_json(report.to_dict(), os.path.join(run_dir, 'metrics.json'))
    return report


def _write_table(table, name, title, notes=()):
    if not os.path.isdir(os.path.dirname(name)):
        os.makedirs(os.path.dirname(name))
    table.to_csv(name + '.csv')
    with open(name + '.txt', 'w', encoding='utf-8') as f:
        f.write(render_text(title, table, notes))


def cmd_evaluate(config, run_dirs=None):
    """Evaluate runs and render the seed-aggregated comparison table.

    Parameters
    ----------
    config : ExperimentConfig
    run_dirs : list of string (optional)
        Defaults to the finished runs of both variants for the configured seeds.

    Returns
    -------
    result : dict
        `reports` (list of MetricReport), `aggregates` (variant ->
        AggregateReport), `uplift` (metric -> percent, when both variants
        ran) and `table` (DataFrame).
    """
    if run_dirs is None:
        run_dirs = [run_directory(config, v, s)[0] for v in VARIANTS for s in config.seeds]
        run_dirs = [r for r in run_dirs if read_manifest(r) is not None]
    if not run_dirs:
        raise ArtifactError('no finished runs to evaluate', hint='run `pySeqDistill train`')
    ingest = load_ingest(config)
    reports = [evaluate_run(config, r, ingest) for r in run_dirs]
    by_variant = fp.group_by(lambda r: r.variant, reports)
    counts = dict((v, len(rs)) for v, rs in by_variant.items())
    if len(set(counts.values())) > 1:
        log.warning('seed count differs between variants counts=%s', counts)
    aggregates = dict((v, aggregate_seeds(rs)) for v, rs in by_variant.items())
    up = None
    if BASELINE in aggregates and DISTILLED in aggregates:
        up = uplift(aggregates[BASELINE], aggregates[DISTILLED])
        aggregates[DISTILLED] = aggregates[DISTILLED]._replace(uplift_pct=up)
    ordered = [aggregates[v] for v in VARIANTS if v in aggregates]
    table = render_table(ordered, BASELINE)
    reports_dir = config.path('reports')
    _write_table(table, os.path.join(reports_dir, 'metrics_table'), '{0}: test metrics'.format(config.dataset),
                 ['{0}: {1} seeds'.format(v, n) for v, n in sorted(counts.items())])
    save_json(dict((v, a.to_dict()) for v, a in aggregates.items()), os.path.join(reports_dir, 'aggregates.json'))
    trajectories = dict((r.variant, LossTrajectory.read(os.path.join(d, 'trajectory.jsonl')))
                        for d, r in zip(run_dirs, reports) if r.seed == min(s.seed for s in by_variant[r.variant]))
    trajectory_frame(trajectories).to_csv(os.path.join(reports_dir, 'trajectories.csv'))
    return {'reports': reports, 'aggregates': aggregates, 'uplift': up, 'table': table}


# grids

def expand_grid(grids, keys=tuple(GRID_SECTIONS)):
    """Cartesian product of the hyperparameter grids as config overrides.

    Returns
    -------
    cells : list of dict
        e.g. ``{'training': {'learning_rate': 0.001, 'batch_size': 128}, 'model': {...}}``
    """
    keys = [k for k in keys if k in grids]
    cells = []
    for values in itertools.product(*[grids[k] for k in keys]):
        cell = {}
        for key, value in zip(keys, values):
            cell.setdefault(GRID_SECTIONS[key], {})[key] = value
        cells.append(cell)
    return cells


def cmd_ablate(config):
    """Train and evaluate every (alpha, dynamic beta, distillation layer) cell
    for the configured seeds; cells whose run is current are reused.

    Returns
    -------
    result : dict
        `table` (DataFrame), `cells` and `executed` (number of runs trained).
    """
    targets = load_targets(config)
    grids = config['grids']
    ingest = load_ingest(config)
    executed = 0
    cells = []
    for alpha, dynamic, layer in itertools.product(grids['alpha'], grids['use_dynamic_beta'],
                                                   grids['distill_layer']):
        cell_config = config.with_overrides({'distillation': {'alpha': alpha, 'use_dynamic_beta': dynamic,
                                                              'distill_layer': layer}})
        reports = []
        for seed in config.seeds:
            run_dir, run_digest = run_directory(cell_config, DISTILLED, seed)
            digest = _run_digest(run_digest, ingest, targets)
            metrics = os.path.join(run_dir, 'metrics.json')
            if _is_current(run_dir, digest) and os.path.exists(metrics):
                report = MetricReport.from_dict(load_json(metrics))
                if report.config_digest == digest:
                    reports.append(report)
                    continue
            if cmd_train(cell_config, DISTILLED, seed)['status'] == 'written':
                executed += 1
            reports.append(evaluate_run(cell_config, run_dir, ingest))
        resolved = cell_config.distillation_config(DISTILLED).layer(cell_config['model']['num_layers'])
        cells.append({'alpha': alpha, 'use_dynamic_beta': dynamic, 'distill_layer': resolved,
                      'metrics': aggregate_seeds(reports).metrics})
    table = render_ablation(cells, 'ndcg@{0}'.format(config['evaluation']['k'][0]))
    _write_table(table, config.path('reports', 'ablation'), '{0}: alpha / beta ablation'.format(config.dataset))
    log.info('ablation cells=%d executed=%d', len(cells), executed)
    return {'table': table, 'cells': cells, 'executed': executed}


def cmd_grid(config, variant=BASELINE, seed=None):
    """Train every hyperparameter cell on the inner split and rank the cells
    by validation NDCG@k (first k of `evaluation.k`)."""
    seed = config.seeds[0] if seed is None else seed
    k = config['evaluation']['k'][0]
    rows = []
    for cell in expand_grid(config['grids']):
        cell_config = config.with_overrides(cell)
        m = cell_config['model']
        if m['hidden_dim'] % m['num_heads']:
            log.warning('skipping grid cell hidden_dim=%d num_heads=%d', m['hidden_dim'], m['num_heads'])
            continue
        result = cmd_train(cell_config, variant, seed, stage='valid')
        report = evaluate_run(cell_config, result['directory'])
        row = fp.merge(*cell.values())
        row['ndcg@{0}'.format(k)] = report.metrics['ndcg@{0}'.format(k)]
        row['recall@{0}'.format(k)] = report.metrics['recall@{0}'.format(k)]
        rows.append(row)
    table = pd.DataFrame(rows).sort_values('ndcg@{0}'.format(k), ascending=False, kind='mergesort')
    table = table.reset_index(drop=True)
    _write_table(table, config.path('reports', 'grid_' + variant), '{0}: validation grid'.format(config.dataset))
    return table


def cmd_all(config, seeds=None, variants=VARIANTS):
    """ingest, profile, train every variant and seed, evaluate."""
    cmd_ingest(config)
    cmd_profile(config)
    seeds = config.seeds if seeds is None else seeds
    jobs = [(v, s) for v in variants for s in seeds]
    n_jobs = config['runtime']['n_jobs']
    Parallel(n_jobs=n_jobs)(delayed(cmd_train)(config, v, s) for v, s in jobs)
    return cmd_evaluate(config, [run_directory(config, v, s)[0] for v, s in jobs])
