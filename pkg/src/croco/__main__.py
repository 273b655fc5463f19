import sys

from croco.cli import main

sys.exit(main())
