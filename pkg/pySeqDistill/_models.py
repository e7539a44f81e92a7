"""
pySeqDistill Models
===================
Small transformer sequential recommenders. The causal variant predicts the
next item left to right (SASRec style), the masked variant recovers masked
items with bidirectional attention (BERT4Rec style). Both expose the hidden
states of every block so that a user representation can be pooled from any
layer.

Sequences are left-padded: the most recent interaction always sits in the
last slot, and index 0 is padding.
"""

from collections import namedtuple
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import ValidationError, validate

log = logging.getLogger(__name__)

CAUSAL = 'causal'
MASKED = 'masked'
ARCHITECTURES = (CAUSAL, MASKED)
CHECKPOINT_FORMAT = 1


class ModelConfig(namedtuple('ModelConfig', ['architecture', 'num_items', 'hidden_dim', 'num_layers',
                                             'num_heads', 'dropout', 'max_len'])):
    """Architecture of a recommender.

    `num_items` is the catalog size M; the vocabulary adds padding (0) and,
    for the masked variant, a mask token (M + 1).
    """
    __slots__ = ()

    def __new__(cls, architecture=CAUSAL, num_items=1, hidden_dim=64, num_layers=2, num_heads=2,
                dropout=0.2, max_len=50):
        self = super(ModelConfig, cls).__new__(cls, architecture, int(num_items), int(hidden_dim),
                                               int(num_layers), int(num_heads), float(dropout),
                                               int(max_len))
        errors = []
        if architecture not in ARCHITECTURES:
            errors.append('architecture must be one of {0}, got {1!r}'.format(ARCHITECTURES, architecture))
        if self.hidden_dim < 1 or self.num_heads < 1 or self.hidden_dim % self.num_heads:
            errors.append('hidden_dim ({0}) must be a positive multiple of num_heads ({1})'
                          .format(self.hidden_dim, self.num_heads))
        if self.num_layers < 1:
            errors.append('num_layers must be positive')
        if not 0 <= self.dropout < 1:
            errors.append('dropout must be in [0, 1)')
        if self.max_len < 1:
            errors.append('max_len must be positive')
        if self.num_items < 1:
            errors.append('the catalog is empty')
        validate(errors)
        return self

    @property
    def vocab_size(self):
        return self.num_items + (2 if self.architecture == MASKED else 1)

    @property
    def mask_index(self):
        return self.num_items + 1 if self.architecture == MASKED else None


class PoolingConfig(namedtuple('PoolingConfig', ['strategy', 'gamma'])):
    __slots__ = ()

    def __new__(cls, strategy='mean', gamma=0.0):
        gamma = float(gamma)
        errors = []
        if strategy not in ('mean', 'exp'):
            errors.append("pooling strategy must be 'mean' or 'exp', got {0!r}".format(strategy))
        if not np.isfinite(gamma) or gamma < 0:
            errors.append('gamma must be finite and >= 0')
        validate(errors)
        return super(PoolingConfig, cls).__new__(cls, strategy, gamma)


class LayerHiddenStates(namedtuple('LayerHiddenStates', ['states', 'mask'])):
    """`states[k - 1]` holds the output of block k, shape [batch, positions, d];
    `mask` marks real (non-padding) positions."""
    __slots__ = ()

    def layer(self, k):
        if not 1 <= k <= len(self.states):
            raise ValueError('layer {0} out of range 1..{1}'.format(k, len(self.states)))
        return self.states[k - 1]


class _Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, hidden_dim, num_heads, dropout):
        super(_Block, self).__init__()
        self.attn_norm = nn.LayerNorm(hidden_dim)
        self.attn = nn.MultiheadAttention(hidden_dim, num_heads, dropout=dropout, batch_first=True)
        self.ffn_norm = nn.LayerNorm(hidden_dim)
        self.ffn = nn.Sequential(nn.Linear(hidden_dim, 4 * hidden_dim), nn.GELU(),
                                 nn.Dropout(dropout), nn.Linear(4 * hidden_dim, hidden_dim))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, blocked):
        h = self.attn_norm(x)
        a, _ = self.attn(h, h, h, attn_mask=blocked, need_weights=False)
        x = x + self.dropout(a)
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class SequentialRecommender(nn.Module):
    """Transformer recommender with learned positions, pre-norm blocks and an
    untied output layer over the vocabulary."""

    def __init__(self, config):
        super(SequentialRecommender, self).__init__()
        self.config = config
        d = config.hidden_dim
        self.item_emb = nn.Embedding(config.vocab_size, d, padding_idx=0)
        self.pos_emb = nn.Embedding(config.max_len, d)
        self.emb_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([_Block(d, config.num_heads, config.dropout)
                                     for _ in range(config.num_layers)])
        self.final_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, config.vocab_size)

    def _attention_mask(self, real):
        n = real.size(1)
        allowed = real.unsqueeze(1).expand(-1, n, -1)
        if self.config.architecture == CAUSAL:
            allowed = allowed & torch.ones(n, n, dtype=torch.bool, device=real.device).tril()
        # padding queries attend to themselves so no softmax row is empty
        allowed = allowed | torch.eye(n, dtype=torch.bool, device=real.device)
        return (~allowed).repeat_interleave(self.config.num_heads, dim=0)

    def forward(self, input_ids):
        """Run the recommender.

        Parameters
        ----------
        input_ids : LongTensor, shape (`batch`, `positions`)
            Left-padded item indices, `positions <= max_len`.

        Returns
        -------
        logits : Tensor, shape (`batch`, `positions`, `vocab_size`)
        hidden : LayerHiddenStates
        """
        if input_ids.dim() != 2:
            raise ValueError('input_ids must have shape [batch, positions]')
        n = input_ids.size(1)
        if n > self.config.max_len:
            raise ValueError('sequence length {0} exceeds max_len {1}'.format(n, self.config.max_len))
        if input_ids.numel() and (input_ids.min() < 0 or input_ids.max() >= self.config.vocab_size):
            raise ValueError('item index out of range [0, {0})'.format(self.config.vocab_size))
        real = input_ids != 0
        if not bool(real.any(dim=1).all()):
            raise ValueError('every row needs at least one non-padding position')

        positions = torch.arange(self.config.max_len - n, self.config.max_len, device=input_ids.device)
        x = self.emb_dropout(self.item_emb(input_ids) + self.pos_emb(positions).unsqueeze(0))
        blocked = self._attention_mask(real)
        states = []
        for block in self.blocks:
            x = block(x, blocked)
            states.append(x)
        logits = self.output(self.final_norm(x))
        return logits, LayerHiddenStates(states, real)


def build_model(config, seed=0):
    """A freshly initialised recommender; weights depend only on `config` and `seed`."""
    torch.manual_seed(seed)
    return SequentialRecommender(config)


def pad_batch(item_lists, max_len, device=None):
    """Left-pad (and left-truncate) lists of item indices to `max_len`."""
    out = torch.zeros((len(item_lists), max_len), dtype=torch.long, device=device)
    for row, items in enumerate(item_lists):
        items = list(items)[-max_len:]
        if items:
            out[row, max_len - len(items):] = torch.as_tensor(items, dtype=torch.long)
    return out


def causal_batch(sequences, max_len):
    """Inputs and shifted next-item targets; target 0 is ignored."""
    inputs = pad_batch([s.items[:-1] for s in sequences], max_len)
    targets = pad_batch([s.items[1:] for s in sequences], max_len)
    return inputs, targets


def masked_batch(sequences, max_len, mask_index, mask_prob=0.2, last_mask_prob=0.1, generator=None):
    """BERT-style masked inputs; targets hold the true item at masked slots and 0 elsewhere.

    Every row gets at least one masked position (the last one when the draw
    selected none); the last position is additionally masked with
    probability `last_mask_prob` so the next-item scoring setup is trained.
    """
    items = pad_batch([s.items for s in sequences], max_len)
    real = items != 0
    draw = torch.rand(items.shape, generator=generator)
    chosen = (draw < mask_prob) & real
    force_last = torch.rand(items.size(0), generator=generator) < last_mask_prob
    force_last |= ~chosen.any(dim=1)
    chosen[:, -1] |= force_last
    inputs = items.masked_fill(chosen, mask_index)
    targets = items.masked_fill(~chosen, 0)
    return inputs, targets


def _require_rows(mask):
    if not bool(mask.any(dim=1).all()):
        raise ValueError('cannot pool a row without unmasked positions')


def mean_pool(hidden, mask):
    """Average of the hidden states over unmasked positions.

    Parameters
    ----------
    hidden : Tensor, shape (`batch`, `positions`, `d`)
    mask : BoolTensor, shape (`batch`, `positions`)

    Returns
    -------
    pooled : Tensor, shape (`batch`, `d`)
    """
    _require_rows(mask)
    m = mask.to(hidden.dtype).unsqueeze(-1)
    return (hidden * m).sum(dim=1) / m.sum(dim=1)


def exp_weights(mask, gamma):
    """Softmax of gamma * t over unmasked positions, t = 1..m oldest to newest."""
    _require_rows(mask)
    t = mask.long().cumsum(dim=1).to(torch.float64)
    scores = (gamma * t).masked_fill(~mask, float('-inf'))
    return torch.softmax(scores, dim=1)


def exp_pool(hidden, mask, gamma):
    """Recency-weighted average of hidden states; gamma = 0 is the plain mean."""
    if gamma < 0:
        raise ValueError('gamma must be >= 0')
    if gamma == 0:
        return mean_pool(hidden, mask)
    w = exp_weights(mask, gamma).to(hidden.dtype)
    return (hidden * w.unsqueeze(-1)).sum(dim=1)


def pool(hidden, layer, pooling):
    """Pool `hidden` (LayerHiddenStates) at `layer` with a PoolingConfig."""
    states = hidden.layer(layer)
    if pooling.strategy == 'exp':
        return exp_pool(states, hidden.mask, pooling.gamma)
    return mean_pool(states, hidden.mask)


def next_item_loss(logits, targets, mask=None):
    """Full-softmax cross-entropy averaged over valid target positions.

    Parameters
    ----------
    logits : Tensor, shape (`batch`, `positions`, `vocab_size`)
    targets : LongTensor, shape (`batch`, `positions`)
        True item per position; 0 marks a position without a target.
    mask : BoolTensor (optional)
        Further restricts the positions that count.
    """
    valid = targets != 0
    if mask is not None:
        valid = valid & mask
    if not bool(valid.any()):
        raise ValueError('no valid target positions')
    return F.cross_entropy(logits[valid], targets[valid])


def inference_items(config, items):
    """The input row used to score the item after `items`."""
    if config.architecture == MASKED:
        return list(items)[-(config.max_len - 1):] + [config.mask_index] if config.max_len > 1 \
            else [config.mask_index]
    return list(items)[-config.max_len:]


@torch.no_grad()
def score_sequences(model, sequences, batch_size=256):
    """Final-position scores of items 1..M for each sequence.

    Returns
    -------
    scores : ndarray, shape (`len(sequences)`, `M`)
        Column j holds the score of item index j + 1.
    """
    config = model.config
    if config.num_items < 1:
        raise ValueError('empty catalog')
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start:start + batch_size]
            inputs = pad_batch([inference_items(config, s.items) for s in chunk], config.max_len)
            logits, _ = model(inputs)
            out.append(logits[:, -1, 1:config.num_items + 1].double().cpu().numpy())
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, config.num_items))
    return np.concatenate(out)


def rank_from_scores(scores, exclude=()):
    """Item indices ordered by descending score, ties by ascending index,
    without the indices in `exclude`."""
    order = np.argsort(-np.asarray(scores), kind='stable') + 1
    if len(exclude):
        order = order[~np.isin(order, np.fromiter(exclude, dtype=np.int64))]
    return order


def rank_items(model, sequence, exclude_history=True):
    """Rank the full catalog for one user.

    Parameters
    ----------
    model : SequentialRecommender
    sequence : UserSequence
    exclude_history : bool
        Drop the items already in `sequence` from the ranking.

    Returns
    -------
    ranked : ndarray of item indices
    """
    if not len(sequence.items):
        raise ValueError('sequence must be non-empty')
    scores = score_sequences(model, [sequence])[0]
    return rank_from_scores(scores, set(sequence.items) if exclude_history else ())


def save_checkpoint(model, path, seed, manifest_digest=None, extra=None):
    """Versioned checkpoint: config, weights, seed and the run-manifest digest."""
    payload = {'format_version': CHECKPOINT_FORMAT,
               'config': dict(model.config._asdict()),
               'state_dict': model.state_dict(),
               'seed': int(seed),
               'manifest_digest': manifest_digest}
    if extra:
        payload['extra'] = extra
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, payload) with the model in eval mode."""
    payload = torch.load(path, map_location='cpu', weights_only=True)
    if payload.get('format_version') != CHECKPOINT_FORMAT:
        raise ValidationError('unsupported checkpoint format {0!r} in {1}'
                              .format(payload.get('format_version'), path))
    model = SequentialRecommender(ModelConfig(**payload['config']))
    model.load_state_dict(payload['state_dict'])
    model.eval()
    return model, payload
