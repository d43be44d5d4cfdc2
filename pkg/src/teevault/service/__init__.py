"""HTTP lab service exposing the hosting protocol over REST."""

from .app import create_app

__all__ = ["create_app"]
