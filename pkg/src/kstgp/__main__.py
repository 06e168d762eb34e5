import sys

from kstgp.cli import main

sys.exit(main())
