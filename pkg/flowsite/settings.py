"""
Django settings for the flowsite project.

The project hosts a single app, `sceneflow`, whose management commands are the
command-line surface of the sparse scene flow engine. There is no database and
no HTTP layer; settings exist for configuration, logging and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file (for local development)
from dotenv import load_dotenv
load_dotenv(BASE_DIR / '.env')


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('SECRET_KEY', 'django-insecure-sceneflow-local-development-key')

DEBUG = os.environ.get('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "sceneflow",
]

# No models anywhere in the project
DATABASES = {}

USE_TZ = True
TIME_ZONE = "UTC"


def _float_list(value):
    return [float(part) for part in value.split(',') if part.strip()]


# Engine defaults. A run config file and command-line flags override these
# per invocation (see sceneflow/run_config.py).
SCENEFLOW = {
    'grid': {
        'range_m': float(os.environ.get('SCENEFLOW_GRID_RANGE', '102.4')),
        'voxel_size': tuple(_float_list(os.environ.get('SCENEFLOW_VOXEL_SIZE', '0.1,0.1,6.0'))),
        'z_min': -3.0,
        'z_max': 3.0,
    },
    'network': {
        'vfe_channels': 32,
        'vfe_hidden': 32,
        'encoder_widths': (64, 128, 256),
        'kernel_size': 3,
        'stride': 2,
        'final_width': 64,
        'head_hidden': 64,
        'norm': True,
        'pooling': 'max',
    },
    'metrics': {
        'bin_edges': (35.0, 50.0, 75.0, 100.0),
        'rangewise_threshold_mps': 1.4,
        'threeway_threshold_mps': 0.5,
        'bucket_width_mps': 0.4,
        'bucket_cap_mps': 20.0,
        'strict_bins': False,
    },
    'scene': {
        'n_background_points': 4000,
        'n_boxes': 6,
        'points_per_box': 150,
        'dt': 0.1,
    },
    'train': {
        'lr': 1e-3,
        'steps': 2000,
        'log_every': 100,
        'objective': 'speed_bucketed',
    },
    'seed': int(os.environ.get('SCENEFLOW_SEED', '0')),
    'threads': int(os.environ.get('SCENEFLOW_THREADS', '1')),
}


# Logging configuration

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'timestamped': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'timestamped',
        },
    },
    'loggers': {
        'sceneflow': {
            'handlers': ['console'],
            'level': os.environ.get('SCENEFLOW_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
