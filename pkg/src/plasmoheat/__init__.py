"""Plasmonic inner fields and boundary temperatures of 2D nanoparticles."""

__version__ = "0.1.0"
