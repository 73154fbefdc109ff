#!/usr/bin/env python3
import logging
import os
import sys

from sentry_init import init_sentry
from workbench import run_cli


def configure_logging() -> logging.Logger:
    # logging configuration (env: LOG_LEVEL, LOG_FILE)
    log_level = os.getenv('LOG_LEVEL', 'INFO').upper()
    log_file = os.getenv('LOG_FILE')
    if log_file:
        handlers = [logging.FileHandler(log_file), logging.StreamHandler()]
    else:
        handlers = [logging.StreamHandler()]
    logging.basicConfig(level=getattr(logging, log_level, logging.INFO),
                        format='%(asctime)s %(levelname)s %(name)s %(message)s', handlers=handlers)
    return logging.getLogger(__name__)


def main(argv=None) -> int:
    logger = configure_logging()
    # Sentry initialization (if configured)
    try:
        if init_sentry():
            logger.info('Sentry initialized')
    except Exception:
        logger.exception('failed to init sentry')
    return run_cli(argv)


if __name__ == '__main__':
    sys.exit(main())
