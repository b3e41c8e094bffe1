"""Hospital pharmacy information system: secure drug-supply web services."""

__version__ = "0.1.0"
