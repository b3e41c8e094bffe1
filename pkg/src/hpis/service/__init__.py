"""HTTP front end: registry and supply nodes served over loopback."""

from .app import create_node_app, create_registry_app

__all__ = ["create_node_app", "create_registry_app"]
