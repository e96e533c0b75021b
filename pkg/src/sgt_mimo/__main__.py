"""Module entry point for python -m sgt_mimo."""

from .cli import main

raise SystemExit(main())
