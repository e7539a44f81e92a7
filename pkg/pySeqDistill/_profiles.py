"""
pySeqDistill Profiles
=====================
From interaction histories to LLM user profiles: metadata aggregation, the
five-point prompt, cached and resumable generation and text encoding.
"""

from collections import namedtuple
import logging
import threading

import jinja2
import numpy as np
from joblib import Parallel, delayed

from .utils import read_jsonl, validate, sha256_text, write_jsonl

log = logging.getLogger(__name__)

LIST_FIELDS = ('categories', 'genres')

PROMPT = jinja2.Template("""\
You are an expert in {{ domain_name }} recommendation. Below is the interaction history of one user, \
oldest first, one line per interaction.

{{ document }}

Based on this history:
{% for block in blocks %}{{ loop.index }}. {{ block }}
{% endfor %}""", keep_trailing_newline=True)

_RATED_BLOCKS = [
    "Analyze the user's interaction history and describe which kinds of {{ domain_name }} they engage "
    "with most.",
    "Analyze how the user's interests evolve over time, noting recurring themes and any shift between "
    "older and more recent interactions.",
    "Identify the key preferences and patterns that the highly-rated {{ domain_name }} have in common.",
    "Distinguish the highly-rated items (rating {{ threshold }} or above) from the poorly-rated ones "
    "(below {{ threshold }}) and explain what the poorly-rated ones lack.",
    "Synthesize an overall characterization of the user and of the {{ domain_name }} they would "
    "appreciate next.",
]

_UNRATED_BLOCKS = _RATED_BLOCKS[:2] + [
    "Identify the key preferences and patterns among the {{ domain_name }} the user interacted with "
    "most frequently.",
    "Distinguish the frequently interacted items from the rarely interacted ones and explain what "
    "separates them.",
    _RATED_BLOCKS[4],
]


class MissingCatalogEntryError(KeyError):
    pass


class PromptTemplate(namedtuple('PromptTemplate', ['domain_name', 'instruction_blocks',
                                                   'metadata_fields', 'rating_threshold'])):
    """Prompt structure: a domain name, exactly five instruction blocks and
    the item fields shown per interaction.

    Instruction blocks may use the jinja2 variables `domain_name` and
    `threshold`; they are expanded at construction time.
    """
    __slots__ = ()

    def __new__(cls, domain_name, instruction_blocks, metadata_fields, rating_threshold=None):
        errors = []
        if not domain_name or not str(domain_name).strip():
            errors.append('domain_name must be non-empty')
        blocks = list(instruction_blocks)
        if len(blocks) != 5:
            errors.append('exactly 5 instruction blocks are required, got {0}'.format(len(blocks)))
        for i, b in enumerate(blocks, 1):
            if not b or not b.strip():
                errors.append('instruction block {0} is empty'.format(i))
        if not metadata_fields:
            errors.append('metadata_fields must name at least one item field')
        validate(errors)
        threshold = None if rating_threshold is None else format(float(rating_threshold), 'g')
        blocks = tuple(jinja2.Template(b).render(domain_name=domain_name, threshold=threshold).strip()
                       for b in blocks)
        return super(PromptTemplate, cls).__new__(cls, domain_name, blocks, tuple(metadata_fields),
                                                  rating_threshold)


def default_template(domain_name='products', metadata_fields=('title', 'categories', 'description'),
                     rating_threshold=None):
    """The five-point template; blocks 3 and 4 contrast ratings when
    `rating_threshold` is given and interaction frequency otherwise."""
    blocks = _RATED_BLOCKS if rating_threshold is not None else _UNRATED_BLOCKS
    return PromptTemplate(domain_name, blocks, metadata_fields, rating_threshold)


def _split_list(value):
    sep = '|' if '|' in value else ','
    return [v.strip() for v in value.split(sep) if v.strip()]


def format_item(item_id, meta, fields, rating=None):
    """One line for one interaction, e.g. ``Toy Story (Animation, Comedy) - rating 5``."""
    head = meta.title if 'title' in fields and meta.title else item_id
    line = head
    for field in fields:
        value = getattr(meta, field, None)
        if field == 'title' or not value:
            continue
        if field in LIST_FIELDS:
            line += ' ({0})'.format(', '.join(_split_list(value)))
        else:
            line += ': {0}'.format(' '.join(value.split()))
    if rating is not None:
        line += ' - rating {0}'.format(format(rating, 'g'))
    return line


def aggregate_metadata(sequence, catalog, template):
    """The text document describing a user's history, one line per
    interaction in chronological order.

    Parameters
    ----------
    sequence : UserSequence
    catalog : Catalog
    template : PromptTemplate
        Supplies `metadata_fields`; missing fields are left out.

    Returns
    -------
    document : string
    """
    if not len(sequence.items):
        raise ValueError('sequence for user {0} is empty'.format(sequence.user_id))
    lines = []
    for pos, index in enumerate(sequence.items):
        try:
            item_id = catalog.id_of(index)
            meta = catalog.items[item_id]
        except KeyError:
            raise MissingCatalogEntryError('item index {0} of user {1} has no catalog entry'
                                           .format(index, sequence.user_id))
        rating = sequence.ratings[pos] if sequence.ratings else None
        lines.append(format_item(item_id, meta, template.metadata_fields, rating))
    return '\n'.join(lines)


def render_prompt(document, template):
    """Header, the document and the five numbered instruction blocks."""
    if not document:
        raise ValueError('document must be non-empty')
    return PROMPT.render(domain_name=template.domain_name, document=document,
                         blocks=template.instruction_blocks)


def prompt_hash(prompt):
    return sha256_text(prompt)


class UserProfile(namedtuple('UserProfile', ['user_id', 'text', 'prompt_hash', 'generator_id'])):
    __slots__ = ()

    def to_dict(self):
        return dict(self._asdict())


class ProfileCache(object):
    """Line-delimited profile store; the one place concurrent generation
    writes to, so every write holds the lock.

    A profile is reused when both the prompt hash and the generator match.
    Failures go to a sidecar file ``<path>.failures`` and are retried on the
    next run.
    """

    def __init__(self, path):
        self.path = path
        self.failure_path = path + '.failures'
        self._lock = threading.Lock()
        self._profiles = {}
        for rec in read_jsonl(path):
            self._profiles[rec['user_id']] = UserProfile(rec['user_id'], rec['text'],
                                                         rec['prompt_hash'], rec['generator_id'])
        self.failures = {}

    def __len__(self):
        return len(self._profiles)

    def lookup(self, user_id, prompt_hash, generator_id=None):
        profile = self._profiles.get(user_id)
        if profile is None or profile.prompt_hash != prompt_hash:
            return None
        if generator_id is not None and profile.generator_id != generator_id:
            return None
        return profile

    def store(self, profile):
        with self._lock:
            write_jsonl([profile.to_dict()], self.path, mode='a')
            self._profiles[profile.user_id] = profile

    def record_failure(self, user_id, prompt_hash, error):
        with self._lock:
            self.failures[user_id] = str(error)
            write_jsonl([{'user_id': user_id, 'prompt_hash': prompt_hash, 'error': str(error)}],
                        self.failure_path, mode='a')


def _generate_one(client, cache, user_id, prompt, digest):
    try:
        text = client.generate(prompt)
        if not text or not text.strip():
            raise ValueError('empty profile text')
    except Exception as e:
        log.warning('profile generation failed user_id=%s error=%s', user_id, e)
        cache.record_failure(user_id, digest, e)
        return None
    profile = UserProfile(user_id, text.strip(), digest, client.generator_id)
    cache.store(profile)
    return profile


def generate_profiles(prompts, client, cache, n_jobs=4):
    """Profiles for `(user_id, prompt)` pairs, calling `client` only for
    prompts the cache does not hold.

    Parameters
    ----------
    prompts : list of (user_id, prompt) pairs
    client : LLMClient
    cache : ProfileCache
    n_jobs : int
        Concurrent client calls.

    Returns
    -------
    profiles : list of UserProfile
        In input order; users whose generation failed are left out.
    """
    hashed = [(user_id, prompt, prompt_hash(prompt)) for user_id, prompt in prompts]
    todo = [h for h in hashed if cache.lookup(h[0], h[2], client.generator_id) is None]
    log.info('profiles total=%d cached=%d to_generate=%d', len(hashed), len(hashed) - len(todo), len(todo))
    if todo:
        Parallel(n_jobs=n_jobs, prefer='threads')(
            delayed(_generate_one)(client, cache, user_id, prompt, digest)
            for user_id, prompt, digest in todo)
    out = [cache.lookup(user_id, digest, client.generator_id) for user_id, _, digest in hashed]
    failed = sum(p is None for p in out)
    if failed:
        log.warning('profiles failed count=%d of=%d', failed, len(hashed))
    return [p for p in out if p is not None]


EncodedProfiles = namedtuple('EncodedProfiles', ['user_ids', 'matrix', 'skipped'])


def _encode_rows(encoder, texts):
    try:
        return list(encoder.encode(texts))
    except Exception as e:
        if len(texts) == 1:
            log.warning('encoder failed on a row error=%s', e)
            return [None]
        return [row for t in texts for row in _encode_rows(encoder, [t])]


def encode_profiles(profiles, encoder, batch_size=32):
    """Encode profile texts with `encoder`.

    Rows that fail to encode, or come back non-finite, are skipped and
    reported in `skipped`.

    Returns
    -------
    encoded : EncodedProfiles
        `matrix` has shape (`len(user_ids)`, `encoder.output_dim`), rows in
        input order.
    """
    if not profiles:
        raise ValueError('profiles must be non-empty')
    rows = []
    for start in range(0, len(profiles), batch_size):
        rows.extend(_encode_rows(encoder, [p.text for p in profiles[start:start + batch_size]]))
    user_ids, kept, skipped = [], [], []
    for profile, row in zip(profiles, rows):
        if row is None or len(row) != encoder.output_dim or not np.all(np.isfinite(row)):
            skipped.append(profile.user_id)
            continue
        user_ids.append(profile.user_id)
        kept.append(np.asarray(row, dtype=np.float64))
    if skipped:
        log.warning('encoder skipped rows count=%d first=%s', len(skipped), skipped[:5])
    matrix = np.vstack(kept) if kept else np.zeros((0, encoder.output_dim))
    return EncodedProfiles(user_ids, matrix, skipped)


def build_prompts(sequences, catalog, template):
    """`(user_id, prompt)` for every sequence."""
    return [(s.user_id, render_prompt(aggregate_metadata(s, catalog, template), template))
            for s in sequences]