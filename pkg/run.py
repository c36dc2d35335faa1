"""
TASFAR: entry point.
Адаптация регрессора к целевому домену без исходных данных.
Run: python run.py <command> [options]   (python run.py --help)
"""
import sys

from cli.main import main

if __name__ == "__main__":
    sys.exit(main())
