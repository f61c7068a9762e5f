"""HTTP adapter exposing models behind the reasonseg wire protocol (docs/wire.md)."""

__version__ = "0.1.0"
