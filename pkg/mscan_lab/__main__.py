"""
Main entry point for the mscan_lab CLI.

Allows running the package as: python -m mscan_lab
"""

from .cli import main

if __name__ == '__main__':
    main()
