DEBUG = True
USE_TZ = False

INSTALLED_APPS = (
    'recrank.RecRankConfig',
)

SECRET_KEY = 'SECRET_KEY'

RECRANK = {
    'work_dir': 'recrank_test_work',
}
