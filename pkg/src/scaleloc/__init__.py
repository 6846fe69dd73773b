"""Scale-aware active pedestrian localization on synthetic scenes."""

__version__ = "0.1.0"
