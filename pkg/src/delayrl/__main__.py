import sys

from delayrl.cli import main

sys.exit(main())
