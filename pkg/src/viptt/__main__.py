"""``python3 -m viptt``."""
import sys

from .cli import main

sys.exit(main())
