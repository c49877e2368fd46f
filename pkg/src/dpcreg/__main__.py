import sys

from dpcreg.evalcli import main

sys.exit(main())
