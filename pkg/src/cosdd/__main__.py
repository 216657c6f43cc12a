import sys

from cosdd.cli import main

sys.exit(main())
