import sys

from shakedrop.cli import main

sys.exit(main())
