import sys

from osafl.cli import main

sys.exit(main())
