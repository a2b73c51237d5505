import sys

from levelsmith.cli import main

sys.exit(main())
