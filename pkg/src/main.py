"""
main.py
"""

import logging
import sys

from fsm_placer.cli import main as cli_main
from fsm_placer.config import settings


def main():
    """
    Entry point of the fsm-placer command line.
    Configures logging from the settings and runs the requested verb.
    Unexpected errors are written to the error log.
    """
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        sys.exit(cli_main())
    except Exception as e:
        import traceback

        with open(settings.ERROR_LOG, "w") as f:
            f.write(f"Error: {e}\n")
            f.write(traceback.format_exc())
        sys.exit(1)


if __name__ == "__main__":
    main()
