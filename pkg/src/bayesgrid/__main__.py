import sys

from bayesgrid.cli import main

sys.exit(main())
