"""
Main entry point: python __main__.py <command> [flags] from the repository root.
"""

import sys

import cli

if __name__ == "__main__":
    sys.exit(cli.main())
