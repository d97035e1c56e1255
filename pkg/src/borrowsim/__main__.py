import sys

from .scenario_cli import main

sys.exit(main())
