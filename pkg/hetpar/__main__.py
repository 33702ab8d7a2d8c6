"""Allow ``python -m hetpar``."""

import sys

from hetpar.main import main

if __name__ == "__main__":
    sys.exit(main())
