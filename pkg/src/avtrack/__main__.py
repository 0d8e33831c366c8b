import sys

from avtrack.cli import main

sys.exit(main())
