#!/usr/bin/env python3
from __future__ import annotations

import faulthandler
import os
import signal
import sys
from pathlib import Path

if 'NO_LOCAL_RECOBENCH' not in os.environ:
    sys.path.insert(1, str(Path(__file__).parent / 'recobench-py'))
from recobench.cli import main

if hasattr(faulthandler, 'register') and hasattr(signal, 'SIGUSR1'):
    faulthandler.register(signal.SIGUSR1)

if __name__ == '__main__':
    sys.exit(main())
