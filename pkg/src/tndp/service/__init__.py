"""HTTP deployment surface: one forward pass per proposed design."""
from tndp.service.app import create_app

__all__ = ["create_app"]
