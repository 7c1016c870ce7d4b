"""silmesh: semi-supervised single-view silhouette-to-mesh reconstruction."""

__version__ = "0.1.0"
