import sys

from piobtree.bench.cli import main

sys.exit(main())
