"""
Tests for the management commands.

Coverage:
- synth: file count, determinism
- infer: ego baseline, zero-head weights reproduce the baseline flow, byte-identical output across runs and
  thread counts, usage and numeric exit codes
- eval: perfect prediction, mismatched point counts, strict bins, identical reports across thread counts
- train_toy: missing data, short run outputs, objective choice
- bench: CSV output and flat peak feature rows across ranges
"""
import csv
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from sceneflow import spconv
from sceneflow.core import FlowField, GridConfig
from sceneflow.network import UnetConfig, ego_motion_baseline, init_params
from sceneflow.scene_io import read_flow, read_frame_pair, read_weights, write_flow, write_weights

GRID_FLAGS = ['--grid-range', '25.6', '--voxel-size', '0.2,0.2,6']
GRID = GridConfig(range_m=25.6, voxel_size=(0.2, 0.2, 6.0))


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def call(self, name, *args):
        out = StringIO()
        call_command(name, *[str(arg) for arg in args], stdout=out)
        return out.getvalue()

    def assertExitCode(self, code, name, *args):
        with self.assertRaises(CommandError) as cm:
            self.call(name, *args)
        self.assertEqual(cm.exception.returncode, code)

    def synth(self, directory, count=1, seed=0):
        self.call('synth', directory, '--count', count, '--points', 300, '--seed', seed, *GRID_FLAGS)
        return sorted(Path(directory).glob('*.sffp'))

    def read_csv(self, path):
        with Path(path).open(newline='') as handle:
            return list(csv.reader(handle))


class SynthCommandTest(CommandTestCase):
    """Test synthetic pair generation."""

    def test_writes_requested_count(self):
        """Test that --count pairs are written with the configured point count."""
        paths = self.synth(self.tmp / 'data', count=2)
        self.assertEqual([p.name for p in paths], ['pair_0000.sffp', 'pair_0001.sffp'])
        pair = read_frame_pair(paths[0])
        self.assertEqual(pair.cloud_t.point_count, 300 + 6 * 150)
        self.assertIsNotNone(pair.cloud_t.gt_flow)

    def test_deterministic(self):
        """Test that the same seed writes byte-identical files."""
        a = self.synth(self.tmp / 'a', seed=5)
        b = self.synth(self.tmp / 'b', seed=5)
        self.assertEqual(a[0].read_bytes(), b[0].read_bytes())

    def test_rejects_zero_count(self):
        """Test that --count 0 is a usage error."""
        self.assertExitCode(2, 'synth', self.tmp, '--count', 0)


class InferCommandTest(CommandTestCase):
    """Test prediction output."""

    def setUp(self):
        super().setUp()
        self.pair_path = self.synth(self.tmp / 'data')[0]
        self.pair = read_frame_pair(self.pair_path)

    def write_toy_weights(self, **replacements):
        params = init_params(UnetConfig.toy(), 0, GRID)
        params = params.replace({name: np.full_like(params[name], value) for name, value in replacements.items()})
        path = self.tmp / 'toy.ssfw'
        write_weights(params.to_bundle(), path)
        return path

    def test_ego_baseline(self):
        """Test that --baseline ego writes the single-precision ego flow with nothing processed."""
        out = self.tmp / 'ego.ssfl'
        self.call('infer', self.pair_path, out, '--baseline', 'ego', *GRID_FLAGS)
        flow = read_flow(out)
        np.testing.assert_array_equal(flow.flow, ego_motion_baseline(self.pair).flow)
        self.assertFalse(flow.processed.any())

    def test_zero_head_matches_baseline(self):
        """Test that weights with a zero output layer reproduce the baseline flow exactly."""
        weights = self.write_toy_weights(**{'head.1.w': 0.0, 'head.1.b': 0.0})
        self.call('infer', self.pair_path, self.tmp / 'net.ssfl', '--weights', weights, *GRID_FLAGS)
        self.call('infer', self.pair_path, self.tmp / 'ego.ssfl', '--baseline', 'ego', *GRID_FLAGS)
        net, ego = read_flow(self.tmp / 'net.ssfl'), read_flow(self.tmp / 'ego.ssfl')
        self.assertEqual(net.flow.tobytes(), ego.flow.tobytes())
        self.assertTrue(net.processed.any())

    def test_identical_across_runs_and_threads(self):
        """Test that repeated runs and 1 or 4 worker threads write the same flow bytes."""
        self.addCleanup(spconv.set_thread_count, 1)
        weights = self.write_toy_weights()
        outputs = []
        for run, threads in enumerate((1, 1, 4)):
            out = self.tmp / f'run_{run}.ssfl'
            self.call('infer', self.pair_path, out, '--weights', weights, '--threads', threads, *GRID_FLAGS)
            outputs.append(out.read_bytes())
        self.assertEqual(outputs[0], outputs[1])
        self.assertEqual(outputs[0], outputs[2])

    def test_needs_exactly_one_source(self):
        """Test that neither or both of --weights and --baseline is a usage error."""
        self.assertExitCode(2, 'infer', self.pair_path, self.tmp / 'x.ssfl', *GRID_FLAGS)

    def test_missing_weights(self):
        """Test that an absent weight file exits with 2."""
        self.assertExitCode(2, 'infer', self.pair_path, self.tmp / 'x.ssfl', '--weights', self.tmp / 'none.ssfw',
                            *GRID_FLAGS)

    def test_incomplete_weights(self):
        """Test that a weight file missing a tensor exits with 2."""
        params = init_params(UnetConfig.toy(), 0, GRID)
        bundle = params.to_bundle()
        bundle.entries = [entry for entry in bundle.entries if entry[0] != 'head.1.b']
        write_weights(bundle, self.tmp / 'broken.ssfw')
        self.assertExitCode(2, 'infer', self.pair_path, self.tmp / 'x.ssfl', '--weights', self.tmp / 'broken.ssfw',
                            *GRID_FLAGS)

    def test_overflow_exits_with_3(self):
        """Test that a forward pass overflowing single precision is a numeric failure."""
        weights = self.write_toy_weights(**{'vfe.0.w': 1e38})
        self.assertExitCode(3, 'infer', self.pair_path, self.tmp / 'x.ssfl', '--weights', weights, *GRID_FLAGS)


class EvalCommandTest(CommandTestCase):
    """Test metric reports."""

    def setUp(self):
        super().setUp()
        self.pair_path = self.synth(self.tmp / 'data')[0]
        self.pair = read_frame_pair(self.pair_path)

    def test_perfect_prediction(self):
        """Test that predicting the GT gives an all-zero report."""
        pred = self.tmp / 'gt.ssfl'
        write_flow(FlowField.dense(self.pair.cloud_t.gt_flow), pred)
        output = self.call('eval', pred, self.pair_path, '--out-dir', self.tmp / 'report', *GRID_FLAGS)
        self.assertIn('static', output)
        rows = self.read_csv(self.tmp / 'report' / 'metrics.csv')
        self.assertEqual(rows[0], ['metric', 'class', 'bin', 'value', 'count'])
        for row in rows[1:]:
            self.assertIn(row[3], ('', '0.0'), row)

    def test_identical_across_threads(self):
        """Test that the metric report does not depend on the thread count."""
        self.addCleanup(spconv.set_thread_count, 1)
        pred = self.tmp / 'ego.ssfl'
        self.call('infer', self.pair_path, pred, '--baseline', 'ego', *GRID_FLAGS)
        reports = []
        for threads in (1, 4):
            out_dir = self.tmp / f'report_{threads}'
            self.call('eval', pred, self.pair_path, '--out-dir', out_dir, '--threads', threads, *GRID_FLAGS)
            reports.append((out_dir / 'metrics.csv').read_bytes())
        self.assertEqual(reports[0], reports[1])

    def test_mismatched_point_count(self):
        """Test that a prediction for another frame exits with 2."""
        pred = self.tmp / 'short.ssfl'
        write_flow(FlowField.dense(np.zeros((3, 3))), pred)
        self.assertExitCode(2, 'eval', pred, self.pair_path, *GRID_FLAGS)

    def test_strict_bins(self):
        """Test that --strict fails on the empty far bins of a small scene."""
        pred = self.tmp / 'gt.ssfl'
        write_flow(FlowField.dense(self.pair.cloud_t.gt_flow), pred)
        self.assertExitCode(2, 'eval', pred, self.pair_path, '--strict', *GRID_FLAGS)


class TrainToyCommandTest(CommandTestCase):
    """Test the training command."""

    def test_empty_directory(self):
        """Test that a directory without pairs exits with 2."""
        (self.tmp / 'empty').mkdir()
        self.assertExitCode(2, 'train_toy', self.tmp / 'empty', self.tmp / 'out.ssfw', *GRID_FLAGS)

    def test_short_run(self):
        """Test that a few steps write loadable weights and one loss row per step."""
        data = self.tmp / 'data'
        self.synth(data, count=2)
        out = self.tmp / 'out.ssfw'
        output = self.call('train_toy', data, out, '--steps', 3, *GRID_FLAGS)
        self.assertIn('Loss', output)
        self.assertIn('speed_bucketed loss', output)
        self.assertEqual(len(read_weights(out)), len(init_params(UnetConfig.toy(), 0, GRID)))
        rows = self.read_csv(f'{out}.loss.csv')
        self.assertEqual(rows[0], ['step', 'loss'])
        self.assertEqual([row[0] for row in rows[1:]], ['0', '1', '2'])


    def test_plain_objective(self):
        """Test that --objective l2 trains with the plain mean loss."""
        data = self.tmp / 'data'
        self.synth(data)
        output = self.call('train_toy', data, self.tmp / 'out.ssfw', '--steps', 1, '--objective', 'l2', *GRID_FLAGS)
        self.assertIn('l2 loss', output)


class BenchCommandTest(CommandTestCase):
    """Test the scaling benchmark."""

    def test_range_sweep(self):
        """Test one CSV row per range and peak feature rows flat across ranges."""
        out = self.tmp / 'bench.csv'
        self.call('bench', '--ranges', '51.2,102.4', '--points', 1200, '--reps', 1, '--toy',
                  '--voxel-size', '0.4,0.4,6', '--out', out)
        rows = self.read_csv(out)
        self.assertEqual(rows[0][:3], ['range_m', 'voxel_size', 'points'])
        self.assertEqual([float(row[0]) for row in rows[1:]], [51.2, 102.4])
        peaks = [int(row[4]) for row in rows[1:]]
        self.assertLess((max(peaks) - min(peaks)) / min(peaks), 0.05)
        dense = [int(row[7]) for row in rows[1:]]
        self.assertEqual(dense[1], 4 * dense[0])

    def test_too_few_points(self):
        """Test that fewer points than the boxes need is a usage error."""
        self.assertExitCode(2, 'bench', '--ranges', '25.6', '--points', 10, '--reps', 1, '--toy')
