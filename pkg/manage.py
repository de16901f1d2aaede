#!/usr/bin/env python
"""Django's command-line utility; the ``reciv`` console script runs the same dispatcher."""

import sys

from core.cli import main

if __name__ == "__main__":
    main(sys.argv, prog="manage.py")
