"""
Management command to score a predicted flow file against a frame pair's GT.

Usage:
    python manage.py eval pred.ssfl pair_0000.sffp
    python manage.py eval pred.ssfl pair_0000.sffp --out-dir reports --strict
    python manage.py eval pred.ssfl pair_0000.sffp --bins 35,50,75,100 --dynamic-threshold 1.4
"""
from dataclasses import replace
from pathlib import Path

from sceneflow.command_base import SceneflowCommand
from sceneflow.metrics import EvalFrame, evaluate
from sceneflow.reports import format_range_table, format_summary, write_report_csv
from sceneflow.scene_io import read_flow, read_frame_pair


class Command(SceneflowCommand):
    help = 'Compute three-way, bucket-normalized and range-wise EPE for a prediction'

    def add_command_arguments(self, parser):
        parser.add_argument('pred_path', help='Predicted SSFL flow file')
        parser.add_argument('pair_path', help='SFFP frame pair carrying ground-truth flow')
        parser.add_argument('--out-dir', help='Directory for metrics.csv (default: no CSV)')
        parser.add_argument(
            '--strict',
            action='store_true',
            help='Fail when a range bin has no dynamic or no static points',
        )
        parser.add_argument('--label', default='prediction', help='Row label in the printed table')

    def run(self, config, **options):
        metric_config = config.metrics
        if options.get('strict'):
            metric_config = replace(metric_config, strict_bins=True)

        pred = read_flow(options['pred_path'])
        pair = read_frame_pair(options['pair_path'])
        report = evaluate(EvalFrame.from_pair(pair, pred), metric_config)

        self.stdout.write(format_range_table(report, options['label']))
        self.stdout.write(format_summary(report))

        if options.get('out_dir'):
            out_dir = Path(options['out_dir'])
            out_dir.mkdir(parents=True, exist_ok=True)
            write_report_csv(report, out_dir / 'metrics.csv')
            self.stdout.write(self.style.SUCCESS(f'Wrote {out_dir / "metrics.csv"}'))
