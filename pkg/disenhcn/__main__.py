import sys

from disenhcn.cli import main

sys.exit(main())
