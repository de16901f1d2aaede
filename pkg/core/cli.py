"""``reciv`` console script: the management command dispatcher under a shorter name."""

import os
import sys


def main(argv=None, prog="reciv"):
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "core.settings")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and available on your PYTHONPATH "
            "environment variable? Did you forget to activate a virtual environment?"
        ) from exc

    argv = list(sys.argv if argv is None else argv)
    argv[0] = prog
    execute_from_command_line(argv)


if __name__ == "__main__":
    main()
