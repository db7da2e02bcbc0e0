"""HTTP service wrapping the lab: submit runs, poll progress, fetch reports."""

from .app import create_app

__all__ = ["create_app"]
