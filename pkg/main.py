import logging
import sys

from src import cli

# Setup logging for command-line runs
logging.basicConfig(
    level=logging.INFO,  # Show all info messages
    format='%(message)s'  # Clean format without timestamps
)

# Get logger instance
logger = logging.getLogger(__name__)

# Disable verbose loggers
logging.getLogger('matplotlib').setLevel(logging.WARNING)
logging.getLogger('PIL').setLevel(logging.WARNING)

if __name__ == "__main__":
    sys.exit(cli.main())
