#!/usr/bin/env python3
"""
Main entry point for the post factum watermark security simulator.
"""

import sys
import os

# Add the code directory to the path so we can import our modules
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'code'))

from cli import main


if __name__ == "__main__":
    sys.exit(main())
