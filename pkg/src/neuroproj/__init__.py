"""Neural projection: learned position constraints for particle dynamics."""
from __future__ import annotations

__version__ = "0.1.0"
