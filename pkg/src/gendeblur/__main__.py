import sys

from gendeblur.harness.cli import main

sys.exit(main())
