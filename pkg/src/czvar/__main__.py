import sys

from czvar.cli import main

sys.exit(main())
