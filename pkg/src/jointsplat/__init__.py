"""Joint refinement of cameras, articulated bodies and 3D Gaussians."""

__version__ = "0.1.0"
