"""End-to-end V2X sidelink tracking simulator at FR1."""

__version__ = "0.1.0"
