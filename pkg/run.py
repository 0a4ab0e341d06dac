"""
Entry point of the IADA lab command line.

Configures logging for the process (level from ``IADA_LOG_LEVEL``) and hands
the arguments to :func:`iadalab.cli.main`.

Usage:
    python run.py gen --preset ed4-ed3 --out results/ed3/data
    python run.py train --config experiment.ini --data results/ed3/data --out results/ed3
    python run.py theory convergence --out results/theory
"""
import logging
import sys

from iadalab import settings
from iadalab.cli import LOG_FORMAT, main

logging.basicConfig(level=getattr(logging, str(settings.LOG_LEVEL).upper(), logging.INFO),
                    format=LOG_FORMAT)

logger = logging.getLogger(__name__)

if __name__ == "__main__":
    sys.exit(main())
