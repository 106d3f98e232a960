"""
Management command to measure how the network scales with grid range.

Usage:
    python manage.py bench --out bench.csv
    python manage.py bench --ranges 51.2,102.4,204.8 --points 50000 --reps 3
    python manage.py bench --voxel-sizes 0.4,0.2,0.1 --grid-range 102.4
"""
from sceneflow.bench import DEFAULT_RANGES, BENCH_COLUMNS, range_sweep, relative_spread, voxel_sweep, write_bench_csv
from sceneflow.command_base import SceneflowCommand
from sceneflow.network import UnetConfig


def _floats(text):
    return [float(part) for part in text.split(',') if part.strip()]


class Command(SceneflowCommand):
    help = 'Benchmark feature rows, rulebook pairs and wall time across grid ranges or voxel sizes'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--ranges',
            default=','.join(str(r) for r in DEFAULT_RANGES),
            help='Comma-separated grid ranges in metres',
        )
        parser.add_argument('--voxel-sizes', help='Sweep horizontal voxel size at a fixed range instead')
        parser.add_argument('--points', type=int, default=50000, help='Points per scan (default 50000)')
        parser.add_argument('--reps', type=int, default=3, help='Timed repetitions per configuration')
        parser.add_argument('--toy', action='store_true', help='Benchmark the toy network')
        parser.add_argument('--out', help='CSV output path')

    def run(self, config, **options):
        network = UnetConfig.toy() if options.get('toy') else config.network
        try:
            ranges = _floats(options['ranges'])
            voxel_sizes = _floats(options['voxel_sizes']) if options.get('voxel_sizes') else None
        except ValueError as exc:
            raise self.usage_error(f'Cannot parse a number list: {exc}')

        if voxel_sizes:
            rows = voxel_sweep(voxel_sizes, options['points'], network, seed=config.seed, reps=options['reps'],
                               range_m=config.grid.range_m, z_size=config.grid.voxel_size[2])
        else:
            rows = range_sweep(ranges, options['points'], network, seed=config.seed, reps=options['reps'],
                               voxel_size=config.grid.voxel_size)

        self.stdout.write(','.join(BENCH_COLUMNS))
        for row in rows:
            self.stdout.write(','.join(str(value) for value in row.as_row()))
        self.stdout.write(
            f'peak feature rows spread {relative_spread(r.peak_feature_rows for r in rows):.1%}, '
            f'wall time spread {relative_spread(r.wall_ms for r in rows):.1%}'
        )

        if options.get('out'):
            write_bench_csv(rows, options['out'])
            self.stdout.write(self.style.SUCCESS(f'Wrote {options["out"]}'))
