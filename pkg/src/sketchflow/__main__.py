"""``python -m sketchflow``."""

from .cli import main

main()
