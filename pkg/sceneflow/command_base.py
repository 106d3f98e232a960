"""
Shared plumbing for the sceneflow management commands: the common flags,
RunConfig assembly and the mapping of engine errors onto exit codes.

Exit codes: 0 success, 2 usage / input / format / config / I-O error,
3 numeric failure.
"""
from __future__ import annotations

import logging

from django.core.management.base import BaseCommand, CommandError

from . import spconv
from .exceptions import NumericError, SceneFlowError
from .run_config import load_run_config

logger = logging.getLogger(__name__)

INPUT_ERROR = 2
NUMERIC_ERROR = 3

# flag dest -> dotted config key
FLAG_KEYS = {
    'seed': 'seed',
    'threads': 'threads',
    'grid_range': 'grid.range_m',
    'voxel_size': 'grid.voxel_size',
    'bins': 'metrics.bin_edges',
    'dynamic_threshold': 'metrics.rangewise_threshold_mps',
}


class SceneflowCommand(BaseCommand):
    """Base class; subclasses implement add_command_arguments() and run()."""

    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Key-value run config file (section.key = value)')
        parser.add_argument('--seed', type=int, help='Random seed')
        parser.add_argument('--threads', type=int, help='Worker threads for convolution products')
        parser.add_argument('--grid-range', type=float, help='Grid side length R in metres')
        parser.add_argument('--voxel-size', help='Voxel size as vx,vy,vz in metres')
        parser.add_argument('--bins', help='Range-wise bin edges in metres, e.g. 35,50,75,100')
        parser.add_argument('--dynamic-threshold', type=float, help='Range-wise dynamic speed threshold (m/s)')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_overrides(self, options):
        """Dotted-key overrides for this command; extend in subclasses."""
        return {key: options.get(dest) for dest, key in FLAG_KEYS.items()}

    def handle(self, *args, **options):
        try:
            config = load_run_config(options.get('config'), self.config_overrides(options))
            spconv.set_thread_count(config.threads)
            # the --config path is already consumed; drop it so it cannot clash with run()'s config argument
            run_options = {key: value for key, value in options.items() if key != 'config'}
            self.run(config, **run_options)
        except NumericError as exc:
            logger.error("%s failed numerically: %s", self.command_label(), exc)
            raise CommandError(f'Numeric failure: {exc}', returncode=NUMERIC_ERROR) from exc
        except (SceneFlowError, OSError) as exc:
            logger.error("%s failed: %s", self.command_label(), exc)
            raise CommandError(str(exc), returncode=INPUT_ERROR) from exc

    def command_label(self):
        return self.__class__.__module__.rsplit('.', 1)[-1]

    def run(self, config, **options):
        raise NotImplementedError('subclasses of SceneflowCommand must provide a run() method')

    def usage_error(self, message):
        return CommandError(message, returncode=INPUT_ERROR)
