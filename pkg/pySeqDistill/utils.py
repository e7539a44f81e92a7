"""
pySeqDistill Utilities
======================
Utility routines shared by the pySeqDistill package: error types, digests,
JSON serialization of numpy values and line-delimited record files.
"""

import hashlib
import json
import logging
import os
import random

import numpy as np

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Raised once with every problem found in an input."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super(ValidationError, self).__init__('\n' + '\n'.join(' * ' + s for s in self.errors))


class ConfigError(ValidationError):
    """Bad configuration or unusable input files (CLI exit code 2)."""


class ArtifactError(RuntimeError):
    """Missing, stale or locked artifact (CLI exit code 3).

    Parameters
    ----------
    message : string
        What went wrong.
    hint : string (optional)
        The command that fixes it.
    """

    def __init__(self, message, hint=None):
        self.hint = hint
        if hint:
            message = '{0} (hint: {1})'.format(message, hint)
        super(ArtifactError, self).__init__(message)


class ExternalServiceError(RuntimeError):
    """An LLM or encoder endpoint failed beyond the retry budget (CLI exit code 4)."""


def validate(errors):
    """Raise a ValidationError when `errors` is non-empty."""
    if errors:
        raise ValidationError(errors)


class NumPyEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (set, frozenset)):
            return sorted(obj)
        return json.JSONEncoder.default(self, obj)


def canonical_json(obj):
    """Key-sorted, whitespace-free JSON used for every digest of structured data."""
    return json.dumps(obj, cls=NumPyEncoder, sort_keys=True, separators=(',', ':'))


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_text(text):
    return sha256_bytes(text.encode('utf-8'))


def sha256_obj(obj):
    return sha256_text(canonical_json(obj))


def sha256_file(path, chunk_size=1 << 20):
    """Hex sha256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(chunk_size), b''):
            h.update(block)
    return h.hexdigest()


def save_json(obj, path):
    """Write `obj` as indented, key-sorted JSON (stable bytes for equal content)."""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, cls=NumPyEncoder, sort_keys=True, indent=2)
        f.write('\n')


def load_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_jsonl(records, path, mode='w'):
    """Write (or append) one canonical JSON document per line."""
    with open(path, mode, encoding='utf-8') as f:
        for rec in records:
            f.write(canonical_json(rec))
            f.write('\n')


def read_jsonl(path):
    """Read a JSON-lines file; a truncated trailing line (killed writer) is skipped."""
    if not os.path.exists(path):
        return []
    out = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except ValueError:
                log.warning('skipping unreadable record path=%s line=%d', path, lineno)
    return out


def set_seed(seed):
    """Seed python, numpy and torch generators."""
    import torch
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


class RunLock(object):
    """Exclusive lock file guarding a run directory against duplicate writers."""

    def __init__(self, directory, name='.lock'):
        self.path = os.path.join(directory, name)
        self._fd = None

    def __enter__(self):
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ArtifactError('run directory is locked by another writer: {0}'.format(self.path),
                                hint='wait for the other run or delete the stale lock file')
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self._fd)
        os.remove(self.path)
        return False
