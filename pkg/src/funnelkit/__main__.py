"""Entry point for ``python -m funnelkit``."""

import sys

from .cli import main

sys.exit(main())
