import sys

from stylediff.main import main

sys.exit(main())
