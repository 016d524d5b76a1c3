"""
fetal - fetal ultrasound vision-language toolkit.
Entry point for the command-line pipeline.
"""

import logging
import sys

from src.config import config
from src.handlers import run

# Logging
logging.basicConfig(
    level=logging.DEBUG if config.DEBUG else getattr(logging, config.LOG_LEVEL, logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def main() -> int:
    """Main entry point."""
    try:
        config.validate()
    except ValueError as e:
        logger.error(f"❌ {e}")
        return 1
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
