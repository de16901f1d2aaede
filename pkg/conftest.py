"""Pytest wiring for the Django ``tests.py`` modules (the same setup ``manage.py test`` performs)."""

import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "core.settings")
django.setup()

_runner = None
_old_config = None


def pytest_configure(config):
    global _runner, _old_config
    from django.test.runner import DiscoverRunner

    _runner = DiscoverRunner(verbosity=0, interactive=False)
    _runner.setup_test_environment()
    _old_config = _runner.setup_databases()


def pytest_unconfigure(config):
    if _runner is None:
        return
    _runner.teardown_databases(_old_config)
    _runner.teardown_test_environment()
