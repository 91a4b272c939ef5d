import sys

from prpd.cli import main

sys.exit(main())
