"""``python3 -m bdarts``."""

import sys

from .cli import main

sys.exit(main())
