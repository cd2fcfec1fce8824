"""
Command-line entry point for the DTNet vehicle detector toolkit.
"""

import logging
import sys

import settings
from runs.controller import main


def configure_logging() -> None:
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


if __name__ == "__main__":
    configure_logging()
    sys.exit(main())
