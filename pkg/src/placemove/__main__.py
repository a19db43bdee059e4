import sys

from placemove.cli import main

sys.exit(main())
