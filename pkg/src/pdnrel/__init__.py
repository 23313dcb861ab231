"""Reliability analysis for power delivery networks of stacked dies.

Submodules: ``core`` (inputs), ``pdn`` (mesh synthesis), ``ir`` (static IR drop),
``thermal`` (compact thermal grid), ``em`` (electromigration stress),
``surrogate`` (boosted-tree stress predictor), ``optimize`` (wire sizing),
``cosim`` (coupled timeline) and ``report`` / ``cli`` (outputs and front end).
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_example(name: str = "two_tier") -> Path:
    """Directory of a bundled example holding its input files."""
    path = Path(str(resources.files(__package__) / "data" / name))
    if not path.is_dir():
        from .errors import ValidationError

        raise ValidationError(f"no bundled example named '{name}'")
    return path
