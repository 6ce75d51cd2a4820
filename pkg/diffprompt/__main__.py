import sys

from diffprompt.cli import main

sys.exit(main())
