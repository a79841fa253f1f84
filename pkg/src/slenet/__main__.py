import sys

from slenet.cli import main

sys.exit(main())
