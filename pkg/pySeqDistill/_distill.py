"""
pySeqDistill Distillation
=========================
Representation alignment between a recommender's pooled hidden state and a
frozen profile target, the dynamic loss scaling and the two-phase training
schedule.

During phase 1 the model minimises

    alpha * beta * l_distill + (1 - alpha) * l_model

where ``beta = l_model / max(l_distill, eps)`` is recomputed for every batch
from detached loss values (``beta = 1`` with dynamic scaling off). Phase 2
drops the auxiliary term; `l_distill` is still measured so the trajectory
covers both phases.
"""

from collections import namedtuple
import logging
import math
import os
import time

import numpy as np
import pandas as pd
import torch

from ._models import (MASKED, PoolingConfig, causal_batch, masked_batch, next_item_loss, pad_batch,
                      pool, save_checkpoint)
from .utils import ConfigError, read_jsonl, validate, write_jsonl

log = logging.getLogger(__name__)

DISTILL = 'distill'
FINETUNE = 'finetune'
BETA_MAX = 1e8


class DistillationConfig(namedtuple('DistillationConfig', ['alpha', 'use_dynamic_beta', 'beta_eps',
                                                           'distill_layer', 'pooling',
                                                           'phase1_fraction', 'total_epochs'])):
    """Distillation settings. `distill_layer` None means the final block;
    `phase1_fraction` 0 trains without distillation (the baseline)."""
    __slots__ = ()

    def __new__(cls, alpha=0.4, use_dynamic_beta=True, beta_eps=1e-8, distill_layer=None,
                pooling=None, phase1_fraction=0.5, total_epochs=20):
        pooling = pooling if pooling is not None else PoolingConfig()
        errors = []
        if not 0 <= alpha <= 1:
            errors.append('alpha must be in [0, 1], got {0}'.format(alpha))
        if not beta_eps > 0:
            errors.append('beta_eps must be positive')
        if not 0 <= phase1_fraction <= 1:
            errors.append('phase1_fraction must be in [0, 1], got {0}'.format(phase1_fraction))
        if int(total_epochs) < 1:
            errors.append('total_epochs must be positive')
        if distill_layer is not None and int(distill_layer) < 1:
            errors.append('distill_layer must be >= 1')
        validate(errors)
        return super(DistillationConfig, cls).__new__(
            cls, float(alpha), bool(use_dynamic_beta), float(beta_eps),
            None if distill_layer is None else int(distill_layer), pooling, float(phase1_fraction),
            int(total_epochs))

    def layer(self, num_layers):
        k = num_layers if self.distill_layer is None else self.distill_layer
        if not 1 <= k <= num_layers:
            raise ConfigError('distill_layer {0} outside 1..{1}'.format(k, num_layers))
        return k

    @property
    def phase1_epochs(self):
        """round(phase1_fraction * total_epochs), halves rounded up."""
        return int(math.floor(self.phase1_fraction * self.total_epochs + 0.5))


TrainingConfig = namedtuple('TrainingConfig', ['learning_rate', 'batch_size', 'grad_clip', 'mask_prob',
                                               'last_mask_prob'])
TrainingConfig.__new__.__defaults__ = (0.001, 128, 5.0, 0.2, 0.1)


class LossBreakdown(namedtuple('LossBreakdown', ['l_model', 'l_distill', 'beta', 'total'])):
    """Loss components of one step. `total` keeps the autograd graph when
    the inputs are tensors; the other fields are plain floats."""
    __slots__ = ()


def _value(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def distill_loss(pooled, target, target_mask=None):
    """Mean squared difference between pooled states and targets.

    Parameters
    ----------
    pooled : Tensor, shape (`batch`, `d`) or (`d`,)
    target : Tensor, same shape
    target_mask : BoolTensor, shape (`batch`) (optional)
        Users without a target are excluded from the mean.

    Returns
    -------
    loss : scalar Tensor
        Per-user mean over coordinates, then mean over unmasked users; 0 when
        no user has a target.
    """
    if pooled.shape != target.shape:
        raise ValueError('pooled shape {0} does not match target shape {1}'
                         .format(tuple(pooled.shape), tuple(target.shape)))
    per_user = ((pooled - target.to(pooled.dtype)) ** 2).mean(dim=-1)
    if target_mask is None:
        return per_user.mean()
    if not bool(target_mask.any()):
        return pooled.sum() * 0.0
    return per_user[target_mask].mean()


def dynamic_beta(l_model, l_distill, eps=1e-8):
    """``l_model / max(l_distill, eps)`` clamped to [0, 1e8], as a plain float
    so it never carries gradient."""
    beta = _value(l_model) / max(_value(l_distill), eps)
    return min(max(beta, 0.0), BETA_MAX)


def combined_loss(l_model, l_distill, config):
    """Phase-1 objective.

    Returns
    -------
    breakdown : LossBreakdown
        ``total = alpha * beta * l_distill + (1 - alpha) * l_model``.
    """
    beta = dynamic_beta(l_model, l_distill, config.beta_eps) if config.use_dynamic_beta else 1.0
    total = config.alpha * beta * l_distill + (1.0 - config.alpha) * l_model
    return LossBreakdown(_value(l_model), _value(l_distill), beta, total)


class LossTrajectory(object):
    """Per-epoch means of the loss components with the phase of each epoch."""
    FIELDS = ['epoch', 'phase', 'l_model', 'l_distill', 'beta', 'l_recon']

    def __init__(self, transition, records=None):
        self.transition = int(transition)
        self.records = list(records or [])

    def append(self, epoch, l_model, l_distill, beta, l_recon=None):
        phase = DISTILL if epoch < self.transition else FINETUNE
        rec = {'epoch': int(epoch), 'phase': phase, 'l_model': l_model, 'l_distill': l_distill,
               'beta': beta, 'l_recon': l_recon}
        self.records.append(rec)
        return rec

    def __len__(self):
        return len(self.records)

    def frame(self):
        return pd.DataFrame(self.records, columns=self.FIELDS)

    def write(self, path):
        write_jsonl(self.records, path)

    @classmethod
    def read(cls, path):
        records = read_jsonl(path)
        distill_epochs = [r['epoch'] for r in records if r['phase'] == DISTILL]
        transition = max(distill_epochs) + 1 if distill_epochs else 0
        return cls(transition, records)


def _mean(values):
    return float(np.mean(values)) if values else None


def target_table(sequences, targets, d):
    """Align a target store (or dict) to `sequences`.

    Returns
    -------
    matrix : Tensor, shape (`len(sequences)`, `d`), zeros for missing users
    present : BoolTensor, shape (`len(sequences)`)
    """
    matrix = torch.zeros((len(sequences), d), dtype=torch.float32)
    present = torch.zeros(len(sequences), dtype=torch.bool)
    if targets is None:
        return matrix, present
    dim = getattr(targets, 'dim', d)
    if dim != d:
        raise ConfigError('target dimension {0} does not match model hidden size {1}'.format(dim, d))
    for i, s in enumerate(sequences):
        v = targets.get(s.user_id)
        if v is None:
            continue
        v = np.asarray(v, dtype=np.float32)
        if len(v) != d:
            raise ConfigError('target dimension {0} does not match model hidden size {1}'.format(len(v), d))
        matrix[i] = torch.from_numpy(v.copy())
        present[i] = True
    return matrix, present


def _batch(model, sequences, training, generator):
    config = model.config
    if config.architecture == MASKED:
        return masked_batch(sequences, config.max_len, config.mask_index, training.mask_prob,
                            training.last_mask_prob, generator)
    return causal_batch(sequences, config.max_len)


def two_phase_train(model, sequences, targets=None, config=None, seed=0, training=None,
                    checkpoint_dir=None, on_epoch=None, manifest_digest=None):
    """Train `model` with the two-phase schedule.

    Parameters
    ----------
    model : SequentialRecommender
        Trained in place.
    sequences : list of UserSequence
        Training histories. Causal models skip users with fewer than two
        interactions.
    targets : TargetStore or dict (optional)
        user_id -> frozen target vector of size `hidden_dim`. Users without a
        target keep training on `l_model` only.
    config : DistillationConfig
    seed : int
        Seeds shuffling, masking and dropout.
    training : TrainingConfig
    checkpoint_dir : string (optional)
        Receives ``checkpoint_phase1.pt`` at the phase boundary and
        ``checkpoint.pt`` at the end.
    on_epoch : callable (optional)
        Called with each trajectory record.
    manifest_digest : string (optional)
        Recorded in the checkpoints.

    Returns
    -------
    model : SequentialRecommender
    trajectory : LossTrajectory
        `l_distill` is the training-batch mean; `l_recon` is
        `probe_reconstruction` after each epoch, None without targets.
    """
    config = config or DistillationConfig()
    training = training or TrainingConfig()
    mconf = model.config
    k = config.layer(mconf.num_layers)
    phase1 = config.phase1_epochs

    min_len = 1 if mconf.architecture == MASKED else 2
    train_seqs = [s for s in sequences if len(s) >= min_len]
    if not train_seqs:
        raise ValueError('no sequence is long enough to train on')
    skipped = len(sequences) - len(train_seqs)
    if skipped:
        log.info('skipping short sequences count=%d', skipped)

    table, present = target_table(train_seqs, targets, mconf.hidden_dim)
    n_present = int(present.sum())
    if phase1 > 0 and config.alpha > 0 and n_present == 0:
        raise ConfigError('distillation requested but no user has a target')
    if targets is not None and n_present < 0.5 * len(train_seqs):
        log.warning('most users lack a distillation target missing=%d of=%d; their distillation term is '
                    'masked', len(train_seqs) - n_present, len(train_seqs))

    generator = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=training.learning_rate)
    trajectory = LossTrajectory(phase1)

    for epoch in range(config.total_epochs):
        if epoch == phase1 and 0 < phase1 and checkpoint_dir:
            save_checkpoint(model, os.path.join(checkpoint_dir, 'checkpoint_phase1.pt'), seed, manifest_digest)
        distilling = epoch < phase1
        started = time.time()
        model.train()
        l_models, l_distills, betas = [], [], []
        order = torch.randperm(len(train_seqs), generator=generator).tolist()
        for start in range(0, len(order), training.batch_size):
            rows = order[start:start + training.batch_size]
            inputs, labels = _batch(model, [train_seqs[i] for i in rows], training, generator)
            logits, hidden = model(inputs)
            l_model = next_item_loss(logits, labels)
            mask = present[rows]
            loss = l_model
            if bool(mask.any()):
                pooled = pool(hidden, k, config.pooling)
                l_distill = distill_loss(pooled, table[rows].to(pooled.dtype), mask)
                breakdown = combined_loss(l_model, l_distill, config)
                if distilling:
                    loss = breakdown.total
                l_distills.append(breakdown.l_distill)
                betas.append(breakdown.beta)
            l_models.append(float(l_model.detach()))
            optimizer.zero_grad()
            loss.backward()
            if training.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), training.grad_clip)
            optimizer.step()
        # eval-mode measurement on the full sequences, comparable across variants
        l_recon = probe_reconstruction(model, train_seqs, targets, config) if n_present else None
        rec = trajectory.append(epoch, _mean(l_models), _mean(l_distills), _mean(betas), l_recon)
        log.info('epoch=%d phase=%s l_model=%.5f l_distill=%s l_recon=%s beta=%s seconds=%.2f',
                 epoch, rec['phase'], rec['l_model'], rec['l_distill'], l_recon, rec['beta'],
                 time.time() - started)
        if on_epoch is not None:
            on_epoch(rec)

    if checkpoint_dir:
        save_checkpoint(model, os.path.join(checkpoint_dir, 'checkpoint.pt'), seed, manifest_digest)
    model.eval()
    return model, trajectory


@torch.no_grad()
def per_user_reconstruction(model, sequences, targets, config, batch_size=256):
    """Per-user distill_loss for every user with a target, without updating
    the model.

    Returns
    -------
    losses : dict
        user_id -> float
    """
    config = config or DistillationConfig()
    mconf = model.config
    k = config.layer(mconf.num_layers)
    sequences = [s for s in sequences if len(s.items) and targets.get(s.user_id) is not None]
    table, _ = target_table(sequences, targets, mconf.hidden_dim)
    was_training = model.training
    model.eval()
    out = {}
    try:
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start:start + batch_size]
            _, hidden = model(pad_batch([s.items for s in chunk], mconf.max_len))
            pooled = pool(hidden, k, config.pooling)
            diff = ((pooled - table[start:start + len(chunk)].to(pooled.dtype)) ** 2).mean(dim=-1)
            out.update(zip([s.user_id for s in chunk], diff.double().tolist()))
    finally:
        model.train(was_training)
    return out


def probe_reconstruction(model, sequences, targets, config=None, batch_size=256):
    """Mean distill_loss over users with targets; a pure measurement."""
    losses = per_user_reconstruction(model, sequences, targets, config, batch_size)
    if not losses:
        raise ValueError('no user has both a sequence and a target')
    return float(np.mean(list(losses.values())))
