"""
Concept Guard - Retrieval-Based Generation Safety
Main Command Line Entry Point
"""

import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Import configuration
from config import configure_logging, get_config  # noqa: E402

# Import the command dispatcher
from concept_guard.cli import main  # noqa: E402


def run(argv=None) -> int:
    """
    Configure logging from the environment and dispatch one subcommand.

    Args:
        argv: Argument list, sys.argv[1:] when omitted

    Returns:
        Process exit code
    """
    config_class = get_config()
    configure_logging(config_class.LOG_LEVEL, config_class.LOG_FORMAT)
    return main(argv)


if __name__ == '__main__':
    sys.exit(run())
