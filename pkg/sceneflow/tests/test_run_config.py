"""
Tests for run configuration layering.

Coverage:
- Settings defaults, config file and flag overrides, later layers winning
- Unknown keys, unparsable values and out-of-range values raise ConfigError
- paths.* keys and the scene generator settings
"""
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from sceneflow.exceptions import ConfigError
from sceneflow.run_config import flatten_settings, load_run_config, read_config_file

DEFAULTS = {
    'grid': {'range_m': 51.2, 'voxel_size': (0.2, 0.2, 6.0)},
    'network': {'encoder_widths': (16, 32), 'final_width': 16},
    'scene': {'n_background_points': 500},
    'seed': 3,
}


class RunConfigTest(SimpleTestCase):
    """Test load_run_config."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def config_file(self, text):
        path = Path(self.tmp.name) / 'run.cfg'
        path.write_text(text)
        return path

    def test_defaults_only(self):
        """Test that the defaults layer alone builds every section."""
        config = load_run_config(defaults=DEFAULTS)
        self.assertEqual(config.grid.range_m, 51.2)
        self.assertEqual(config.network.encoder_widths, (16, 32))
        self.assertEqual(config.network.vfe_channels, 32)
        self.assertEqual(config.metrics.bin_edges, (35.0, 50.0, 75.0, 100.0))
        self.assertEqual(config.seed, 3)
        self.assertEqual(config.threads, 1)
        self.assertEqual(config.train.objective, 'speed_bucketed')

    @override_settings(SCENEFLOW={'grid': {'range_m': 25.6}, 'threads': 2})
    def test_reads_django_settings(self):
        """Test that settings.SCENEFLOW is the default layer."""
        self.assertEqual(flatten_settings(), {'grid.range_m': 25.6, 'threads': 2})
        config = load_run_config()
        self.assertEqual(config.grid.range_m, 25.6)
        self.assertEqual(config.threads, 2)

    def test_file_then_flags(self):
        """Test that the file overrides the defaults and flags override the file."""
        path = self.config_file(
            "# long-range grid\n"
            "grid.range_m = 204.8\n"
            "metrics.bin_edges = 35,50,75,100,inf\n"
            "network.norm = off\n"
            "seed = 7\n"
        )
        config = load_run_config(path, {'seed': 9, 'grid.voxel_size': None}, defaults=DEFAULTS)
        self.assertEqual(config.grid.range_m, 204.8)
        self.assertEqual(config.grid.voxel_size, (0.2, 0.2, 6.0))
        self.assertEqual(config.metrics.bin_edges, (35.0, 50.0, 75.0, 100.0))
        self.assertFalse(config.network.norm)
        self.assertEqual(config.seed, 9)

    def test_flag_strings_are_parsed(self):
        """Test that flag values given as text go through the key parsers."""
        config = load_run_config(overrides={'grid.voxel_size': '0.4,0.4,6', 'metrics.bin_edges': '20,40'},
                                 defaults=DEFAULTS)
        self.assertEqual(config.grid.voxel_size, (0.4, 0.4, 6.0))
        self.assertEqual(config.metrics.bin_edges, (20.0, 40.0))

    def test_paths_and_scene(self):
        """Test that paths.* pass through and scene keys reach the generator."""
        path = self.config_file("paths.data = /tmp/pairs\nscene.n_boxes = 2\n")
        config = load_run_config(path, defaults=DEFAULTS)
        self.assertEqual(config.paths, {'data': '/tmp/pairs'})
        scene = config.scene_config(seed=11)
        self.assertEqual(scene.n_boxes, 2)
        self.assertEqual(scene.n_background_points, 500)
        self.assertEqual(scene.rng_seed, 11)
        self.assertIs(scene.grid, config.grid)

    def test_unknown_key_in_file(self):
        """Test that a misspelt key is refused."""
        path = self.config_file("grid.rnage_m = 10\n")
        with self.assertRaises(ConfigError) as cm:
            read_config_file(path)
        self.assertEqual(cm.exception.key, 'grid.rnage_m')

    def test_unknown_override(self):
        """Test that an unknown flag key is refused."""
        with self.assertRaises(ConfigError):
            load_run_config(overrides={'network.depth': 4}, defaults=DEFAULTS)

    def test_missing_file(self):
        """Test that a missing config file is reported as a config error."""
        with self.assertRaises(ConfigError):
            load_run_config(Path(self.tmp.name) / 'absent.cfg', defaults=DEFAULTS)

    def test_unparsable_value(self):
        """Test that a value the key parser rejects names the key."""
        with self.assertRaises(ConfigError) as cm:
            load_run_config(overrides={'seed': 'abc'}, defaults=DEFAULTS)
        self.assertEqual(cm.exception.key, 'seed')

    def test_invalid_section_values(self):
        """Test that section validation errors become config errors."""
        for overrides in ({'network.kernel_size': 2}, {'grid.range_m': -1.0}, {'metrics.bin_edges': '50,35'},
                          {'threads': 0}, {'train.steps': -5}, {'network.norm': 'maybe'},
                          {'train.objective': 'huber'}):
            with self.assertRaises(ConfigError, msg=str(overrides)):
                load_run_config(overrides=overrides, defaults=DEFAULTS)
