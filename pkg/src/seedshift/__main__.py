import sys

from seedshift.cli import main

sys.exit(main())
