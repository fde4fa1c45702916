"""
Command-line entry script.

Usage:
    python manage.py synth --preset repetitive --users 20 --items 10 --events 2000 --seed 7 --out data/rep.csv
    python manage.py train --data data/rep.csv --out runs/rep
    python manage.py eval --checkpoint runs/rep --data data/rep.csv
    python manage.py tbatch --data data/rep.csv

Environment selection follows INTERLACE_ENV (or --env).
"""
from interlace.cli import cli


if __name__ == '__main__':
    cli()
