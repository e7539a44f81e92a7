# -*- coding: utf-8 -*-
"""
Distilling LLM user profiles into sequential recommenders
=========================================================

Functions: Data
---------------
:func:`k_core_filter`
    iteratively drop users and items with fewer than k interactions

:func:`temporal_split`
    global temporal train/test split at one timestamp threshold

:func:`build_sequences`
    chronological, length-capped item sequences per user

Functions: Profiles
-------------------
:func:`aggregate_metadata`, :func:`render_prompt`
    the per-user history document and the five-point prompt

:func:`generate_profiles`, :func:`encode_profiles`
    cached LLM profile generation and text encoding

:func:`fit_projection`, :func:`project`
    map profile embeddings into the recommender's hidden space

Functions: Models and training
------------------------------
:func:`build_model`, :func:`rank_items`
    transformer recommenders and full-catalog ranking

:func:`mean_pool`, :func:`exp_pool`
    sequence representations from one layer's hidden states

:func:`two_phase_train`
    distillation followed by next-item fine-tuning

:func:`probe_reconstruction`
    how well a model's pooled state reconstructs the profile targets

Functions: Evaluation and experiments
-------------------------------------
:func:`evaluate`, :func:`aggregate_seeds`, :func:`uplift`
    NDCG / Recall at k, seed aggregation and relative improvement

:func:`load_config`, :func:`cmd_all`
    run the configured pipeline end to end
"""

__all__ = ["__version__",
           "InteractionRecord", "ItemMeta", "UserSequence", "SplitDataset", "Catalog", "DatasetStats",
           "k_core_filter", "temporal_split", "validation_split", "build_catalog", "encode_items",
           "build_sequences", "dataset_stats", "load_interactions", "load_item_metadata",
           "PromptTemplate", "UserProfile", "ProfileCache", "default_template", "aggregate_metadata",
           "render_prompt", "generate_profiles", "encode_profiles",
           "ProjectionModel", "ProfileTarget", "fit_projection", "project", "write_targets", "read_targets",
           "cluster_targets",
           "ModelConfig", "PoolingConfig", "LayerHiddenStates", "SequentialRecommender", "build_model",
           "mean_pool", "exp_pool", "next_item_loss", "rank_items", "save_checkpoint", "load_checkpoint",
           "DistillationConfig", "TrainingConfig", "LossBreakdown", "LossTrajectory", "distill_loss",
           "dynamic_beta", "combined_loss", "two_phase_train", "probe_reconstruction",
           "MetricReport", "AggregateReport", "recall_at_k", "ndcg_at_k", "evaluate", "aggregate_seeds",
           "uplift", "render_table", "render_ablation", "trajectory_frame",
           "ExperimentConfig", "load_config", "expand_grid", "cmd_ingest", "cmd_profile", "cmd_train",
           "cmd_evaluate", "cmd_ablate", "cmd_grid", "cmd_all", "make_toy_dataset"]

__version__ = '0.1.0'

from ._ingest import (InteractionRecord, ItemMeta, UserSequence, SplitDataset, Catalog, DatasetStats,
                      k_core_filter, temporal_split, validation_split, build_catalog, encode_items,
                      build_sequences, dataset_stats, load_interactions, load_item_metadata)
from ._profiles import (PromptTemplate, UserProfile, ProfileCache, default_template, aggregate_metadata,
                        render_prompt, generate_profiles, encode_profiles)
from ._projection import (ProjectionModel, ProfileTarget, fit_projection, project, write_targets,
                          read_targets, cluster_targets)
from ._models import (ModelConfig, PoolingConfig, LayerHiddenStates, SequentialRecommender, build_model,
                      mean_pool, exp_pool, next_item_loss, rank_items, save_checkpoint, load_checkpoint)
from ._distill import (DistillationConfig, TrainingConfig, LossBreakdown, LossTrajectory, distill_loss,
                       dynamic_beta, combined_loss, two_phase_train, probe_reconstruction)
from ._evaluate import (MetricReport, AggregateReport, recall_at_k, ndcg_at_k, evaluate, aggregate_seeds,
                        uplift, render_table, render_ablation, trajectory_frame)
from ._experiment import (ExperimentConfig, load_config, expand_grid, cmd_ingest, cmd_profile, cmd_train,
                          cmd_evaluate, cmd_ablate, cmd_grid, cmd_all)
from .toy import make_toy_dataset
