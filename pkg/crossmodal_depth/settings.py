"""
Django settings for crossmodal_depth project.

The toolkit runs as a set of management commands, so there is no database,
no URL configuration and no template layer. Numeric defaults shared by all
apps live in the DEPTHKIT dict below and are read through core.conf.
"""
import os

from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

SECRET_KEY = os.environ.get('DEPTHKIT_SECRET_KEY', 'depthkit-insecure-local-only')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'core',
    'imaging',
    'geometry',
    'normals',
    'polarisation',
    'itof',
    'warp',
    'losses',
    'gradients',
    'synth',
    'solver',
    'calib',
    'reports',
]

DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'


# Logging

LOG_LEVEL = os.environ.get('DEPTHKIT_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        }
        for app in INSTALLED_APPS
    },
}


# Toolkit defaults

def _env_flag(name):
    return os.environ.get(name, '').strip().lower() in ('1', 'true', 'yes', 'on')


DEPTHKIT = {
    # polarisation
    'REFRACTIVE_INDEX': 1.5,
    # i-ToF
    'MODULATION_FREQUENCY_HZ': 25e6,
    'SPEED_OF_LIGHT': 299792458.0,
    'AMPLITUDE_EPSILON': 1e-9,
    # losses
    'SSIM_ALPHA': 0.85,
    'SSIM_C1': 0.01 ** 2,
    'SSIM_C2': 0.03 ** 2,
    'NORMALISATION_PERCENTILE': 99.0,
    'DF_GRAD_THRESHOLD': 0.15,
    'DF_SEARCH_RADIUS': 8,
    'TIE_TOLERANCE': 1e-10,
    'STRUCT_MAX_RANGE_M': 10.0,
    # solver
    'DEPTH_RANGE_M': (0.1, 20.0),
    'SOLVER_ITERATIONS': 500,
    'SOLVER_STEP': 1e-2,
    'SOLVER_MOMENTUM': 0.9,
    'SOLVER_DECAY': 0.995,
    'SOLVER_OPTIMIZER': 'momentum',
    'SOLVER_INIT': 'auto',
    'SOLVER_INITIAL_DEPTH_M': 3.0,
    'DIVERGENCE_LIMIT': 1e6,
    # calibration
    'HUBER_DELTA_PX': 1.0,
    'LM_INITIAL_LAMBDA': 1e-4,
    'LM_MAX_ITERS': 100,
    'LM_TOLERANCE': 1e-12,
    # geometry
    'UNDISTORT_MAX_ITERS': 20,
    'UNDISTORT_TOLERANCE': 1e-10,
    # runtime
    'THREADS': int(os.environ.get('DEPTHKIT_THREADS', '1')),
    'CORRUPT_ADJOINT': _env_flag('DEPTHKIT_CORRUPT_ADJOINT'),
}
