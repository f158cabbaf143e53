import sys

from ic_align.cli import main


sys.exit(main())
