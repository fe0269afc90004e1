import sys

from qntrpo.cli import main

sys.exit(main())
