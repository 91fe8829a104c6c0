#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
nerfreg launcher
Checks dependencies, then runs one nerfreg command line invocation.
"""

import sys
import logging
from pathlib import Path

# Set UTF-8 encoding for stdout/stderr
if sys.platform.startswith('win'):
    import codecs
    sys.stdout = codecs.getwriter('utf-8')(sys.stdout.detach())
    sys.stderr = codecs.getwriter('utf-8')(sys.stderr.detach())

# Add the repository root to Python path
sys.path.insert(0, str(Path(__file__).parent))

# Only warnings until the command configures its own log file
logging.basicConfig(
    level=logging.WARNING,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[logging.StreamHandler()]
)

logger = logging.getLogger(__name__)


def check_dependencies():
    """Check if all required dependencies are available."""
    missing_deps = []

    try:
        import torch
    except ImportError:
        missing_deps.append("torch")

    try:
        import numpy
    except ImportError:
        missing_deps.append("numpy")

    try:
        import scipy
    except ImportError:
        missing_deps.append("scipy")

    try:
        import sklearn
    except ImportError:
        missing_deps.append("scikit-learn")

    try:
        import pandas
    except ImportError:
        missing_deps.append("pandas")

    try:
        import imageio
    except ImportError:
        missing_deps.append("imageio")

    try:
        import dotenv
    except ImportError:
        missing_deps.append("python-dotenv")

    if missing_deps:
        error_msg = f"Missing required dependencies:\n{chr(10).join(f'- {dep}' for dep in missing_deps)}\n\n"
        error_msg += "Please install them using:\npip install -r requirements.txt"

        print(error_msg, file=sys.stderr)
        return False

    return True


def main():
    """Launcher entry point."""
    if not check_dependencies():
        sys.exit(1)

    from nerfreg.cli import main as cli_main

    try:
        sys.exit(cli_main())
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        sys.exit(1)


if __name__ == "__main__":
    main()
