"""Single-view 3D reconstruction with a four-branch occupancy network."""

__version__ = "1.0.0"
