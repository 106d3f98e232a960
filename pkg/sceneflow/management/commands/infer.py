"""
Management command to predict per-point flow for one frame pair.

Usage:
    python manage.py infer pair_0000.sffp pred.ssfl --weights model.ssfw
    python manage.py infer pair_0000.sffp ego.ssfl --baseline ego
"""
import logging

from sceneflow.command_base import SceneflowCommand
from sceneflow.network import SsfParams, ego_motion_baseline, ssf_forward
from sceneflow.scene_io import read_frame_pair, read_weights, write_flow

logger = logging.getLogger(__name__)


class Command(SceneflowCommand):
    help = 'Run the scene flow network (or the ego-motion baseline) on an SFFP pair and write SSFL flow'

    def add_command_arguments(self, parser):
        parser.add_argument('pair_path', help='Input SFFP frame pair')
        parser.add_argument('out_path', help='Output SSFL flow file')
        parser.add_argument('--weights', help='SSFW weight file')
        parser.add_argument(
            '--baseline',
            choices=['ego'],
            help='Write a baseline prediction instead of running the network',
        )

    def run(self, config, **options):
        weights = options.get('weights')
        baseline = options.get('baseline')
        if bool(weights) == bool(baseline):
            raise self.usage_error('Pass exactly one of --weights or --baseline')

        pair = read_frame_pair(options['pair_path'])
        if baseline == 'ego':
            flow = ego_motion_baseline(pair)
        else:
            bundle = read_weights(weights)
            params = SsfParams.from_bundle(bundle, config.grid, config.network.stride, config.network.pooling)
            logger.info("loaded %d tensors (%d parameters) from %s", len(bundle), params.parameter_count(), weights)
            flow = ssf_forward(pair, params, config.grid)

        write_flow(flow, options['out_path'])
        processed = int(flow.processed.sum()) if flow.processed is not None else 0
        self.stdout.write(self.style.SUCCESS(
            f'Wrote flow for {len(flow)} points ({processed} processed) to {options["out_path"]}'
        ))
