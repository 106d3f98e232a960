"""
Management command to overfit the network on a directory of synthetic pairs.

Usage:
    python manage.py train_toy data/toy model.ssfw
    python manage.py train_toy data/toy model.ssfw --steps 500 --lr 1e-3 --loss-csv loss.csv
"""
from pathlib import Path

from sceneflow.command_base import SceneflowCommand
from sceneflow.network import UnetConfig, init_params
from sceneflow.scene_io import read_frame_pair, write_weights
from sceneflow.train import OBJECTIVES, fit, write_loss_trace


class Command(SceneflowCommand):
    help = 'Train the toy network on SFFP pairs and write SSFW weights plus a loss trace'

    def add_command_arguments(self, parser):
        parser.add_argument('data_dir', help='Directory of .sffp frame pairs')
        parser.add_argument('out_weights', help='Output SSFW weight file')
        parser.add_argument('--steps', type=int, help='Optimizer steps')
        parser.add_argument('--lr', type=float, help='Adam learning rate')
        parser.add_argument('--objective', choices=OBJECTIVES, help='Training loss: plain l2 or speed_bucketed')
        parser.add_argument('--loss-csv', help='Loss trace path (default: <out_weights>.loss.csv)')
        parser.add_argument(
            '--config-network',
            action='store_true',
            help='Use the network section of the run config instead of the toy network',
        )

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        overrides['train.steps'] = options.get('steps')
        overrides['train.lr'] = options.get('lr')
        overrides['train.objective'] = options.get('objective')
        return overrides

    def run(self, config, **options):
        data_dir = Path(options['data_dir'])
        if not data_dir.is_dir():
            raise self.usage_error(f'{data_dir} is not a directory')
        paths = sorted(data_dir.glob('*.sffp'))
        if not paths:
            raise self.usage_error(f'No .sffp files in {data_dir}')

        pairs = [read_frame_pair(path) for path in paths]
        network = config.network if options.get('config_network') else UnetConfig.toy()
        params = init_params(network, config.seed, config.grid)
        self.stdout.write(
            f'Training on {len(pairs)} pairs: {params.parameter_count()} parameters, '
            f'{config.train.steps} steps, lr {config.train.lr}, {config.train.objective} loss'
        )

        result = fit(pairs, params, config.grid, config.train.steps, lr=config.train.lr,
                     log_every=config.train.log_every, objective=config.train.objective)

        out_weights = Path(options['out_weights'])
        write_weights(result.params.to_bundle(), out_weights)
        loss_csv = Path(options.get('loss_csv') or f'{out_weights}.loss.csv')
        write_loss_trace(result.loss_trace, loss_csv)

        if result.loss_trace:
            first, last = result.loss_trace[0], result.loss_trace[-1]
            self.stdout.write(f'Loss {first:.5f} -> {last:.5f}')
        self.stdout.write(self.style.SUCCESS(f'Wrote {out_weights} and {loss_csv}'))
