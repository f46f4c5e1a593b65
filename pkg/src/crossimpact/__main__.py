import sys

from crossimpact.cli import main

sys.exit(main())
