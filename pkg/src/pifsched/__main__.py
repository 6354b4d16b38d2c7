"""

    Contraction geometry of diffusion noise schedules.

    This file is a part of the pifsched
    project and distributed under MIT license.

"""

import sys

from pifsched.cli import main


sys.exit(main())
