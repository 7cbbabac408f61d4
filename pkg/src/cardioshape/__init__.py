"""Direct 3D biventricular shape prediction from images and patient metadata."""

__version__ = "0.1.0"
