import sys

from gritplan.cli import main

sys.exit(main())
