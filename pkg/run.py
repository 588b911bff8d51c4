#!/usr/bin/env python3
"""
Voltage Stability Toolkit - command-line entry point
"""
import sys

from stability_toolkit import main

if __name__ == "__main__":
    sys.exit(main())
