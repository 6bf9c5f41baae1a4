import sys

from planrank.cli import main

sys.exit(main())
