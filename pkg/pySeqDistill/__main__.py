"""
pySeqDistill Command Line
=========================
``python -m pySeqDistill <verb> --config PATH [options]``

Exit codes: 0 success, 2 configuration error, 3 missing or stale artifact,
4 external service failure.
"""

import argparse
import logging
import os
import sys

from ._experiment import (VARIANTS, cmd_ablate, cmd_all, cmd_evaluate, cmd_grid, cmd_ingest, cmd_profile,
                          cmd_train, load_config)
from .toy import make_toy_dataset
from .utils import ArtifactError, ConfigError, ExternalServiceError

log = logging.getLogger('pySeqDistill')

VERBS = ('ingest', 'profile', 'train', 'evaluate', 'ablate', 'grid', 'all', 'toy')
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_SERVICE = 4


def build_parser():
    parser = argparse.ArgumentParser(prog='pySeqDistill',
                                     description='Distill LLM user profiles into sequential recommenders.')
    parser.add_argument('verb', choices=VERBS)
    parser.add_argument('--config', help='YAML experiment configuration')
    parser.add_argument('--seed', type=int, help='single seed (train, grid); default: configured seeds')
    parser.add_argument('--variant', choices=VARIANTS, help='default: both variants')
    parser.add_argument('--mock-llm', action='store_true', help='use the offline mock LLM and encoder')
    parser.add_argument('--out', help='output directory (overrides runtime.out_dir)')
    parser.add_argument('--run', action='append', dest='runs', help='run directory to evaluate (repeatable)')
    parser.add_argument('--log-level', default='INFO')
    return parser


def _overrides(args):
    overrides = {}
    if args.mock_llm:
        overrides['client'] = {'mock': True}
        overrides['encoder'] = {'mock': True}
    if args.out:
        overrides['runtime'] = {'out_dir': os.path.abspath(args.out)}
    return overrides


def run(args):
    if args.verb == 'toy':
        make_toy_dataset(os.path.abspath(args.out or 'toy'), seed=args.seed or 0)
        return
    if not args.config:
        raise ConfigError('--config is required for `{0}`'.format(args.verb))
    config = load_config(args.config, _overrides(args))
    seeds = [args.seed] if args.seed is not None else config.seeds
    variants = [args.variant] if args.variant else list(VARIANTS)
    if args.verb == 'ingest':
        cmd_ingest(config)
    elif args.verb == 'profile':
        cmd_profile(config)
    elif args.verb == 'train':
        for variant in variants:
            for seed in seeds:
                cmd_train(config, variant, seed)
    elif args.verb == 'evaluate':
        result = cmd_evaluate(config, args.runs)
        print(result['table'].to_string())
    elif args.verb == 'ablate':
        print(cmd_ablate(config)['table'].to_string())
    elif args.verb == 'grid':
        print(cmd_grid(config, args.variant or 'baseline', args.seed).to_string())
    elif args.verb == 'all':
        print(cmd_all(config, seeds, variants)['table'].to_string())


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s %(message)s')
    try:
        run(args)
    except ValueError as e:
        # ConfigError and every other input validation failure
        log.error('%s', e)
        return EXIT_CONFIG
    except ArtifactError as e:
        log.error('%s', e)
        return EXIT_ARTIFACT
    except ExternalServiceError as e:
        log.error('%s', e)
        return EXIT_SERVICE
    return 0


if __name__ == '__main__':
    sys.exit(main())
