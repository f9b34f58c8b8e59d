import sys

from cramkit.cli import main

sys.exit(main())
