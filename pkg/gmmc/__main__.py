import sys

from gmmc.cli import main

sys.exit(main())
