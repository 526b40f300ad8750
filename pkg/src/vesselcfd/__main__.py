import sys

from vesselcfd.cli import main

sys.exit(main())
