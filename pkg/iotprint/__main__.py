import sys

from iotprint.cli import main

sys.exit(main())
