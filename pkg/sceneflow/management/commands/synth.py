"""
Management command to write deterministic synthetic frame pairs.

Usage:
    python manage.py synth data/toy --count 5
    python manage.py synth data/toy --count 5 --seed 3 --points 5000
"""
from pathlib import Path

from sceneflow.command_base import SceneflowCommand
from sceneflow.scene_io import synth_frame_pair, write_frame_pair


class Command(SceneflowCommand):
    help = 'Generate synthetic SFFP frame pairs with exact ground-truth flow'

    def add_command_arguments(self, parser):
        parser.add_argument('out_dir', help='Directory to write pair_NNNN.sffp files into')
        parser.add_argument('--count', type=int, default=5, help='Number of scenes (default 5)')
        parser.add_argument(
            '--points',
            type=int,
            help='Background points per scan (boxes add their own points)',
        )

    def config_overrides(self, options):
        overrides = super().config_overrides(options)
        overrides['scene.n_background_points'] = options.get('points')
        return overrides

    def run(self, config, **options):
        count = options['count']
        if count < 1:
            raise self.usage_error(f'--count must be >= 1, got {count}')
        out_dir = Path(options['out_dir'])
        out_dir.mkdir(parents=True, exist_ok=True)

        for index in range(count):
            scene_cfg = config.scene_config(seed=config.seed + index)
            path = out_dir / f'pair_{index:04d}.sffp'
            pair = synth_frame_pair(scene_cfg)
            write_frame_pair(pair, path)
            self.stdout.write(f'  {path.name}: {pair.cloud_t.point_count} points')

        self.stdout.write(self.style.SUCCESS(f'Wrote {count} frame pairs to {out_dir}'))
