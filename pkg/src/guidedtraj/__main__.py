import sys

from guidedtraj.cli import main

sys.exit(main())
