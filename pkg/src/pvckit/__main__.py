import sys

from pvckit.cli import main

sys.exit(main())
