#!/usr/bin/env python3
"""Entry point: python bentoframe.py <command> ..."""

import sys

from app.harness.cli import main

if __name__ == "__main__":
    sys.exit(main())
