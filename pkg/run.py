#!/usr/bin/env python3
"""
Simple script to run the dmif command-line tool
"""

import sys

from dmif.main import main

if __name__ == "__main__":
    sys.exit(main())
