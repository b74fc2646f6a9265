import os

DEBUG = False
USE_TZ = False

INSTALLED_APPS = (
    'recrank.RecRankConfig',
)

SECRET_KEY = os.environ.get('RECRANK_SECRET_KEY', 'recrank-local')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'recrank': {
            'handlers': ['console'],
            'level': os.environ.get('RECRANK_LOG_LEVEL', 'INFO'),
        },
    },
}

RECRANK = {}
