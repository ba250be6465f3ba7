import sys

from deskdrive.cli import main

sys.exit(main())
