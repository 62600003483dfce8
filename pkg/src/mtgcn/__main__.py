import sys

from mtgcn.cli import main

sys.exit(main())
