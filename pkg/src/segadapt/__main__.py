"""Lets ``python -m segadapt`` behave like the ``segadapt`` console script."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
