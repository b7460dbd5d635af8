"""Active exploration of 360-degree panoramas with retina glimpses and spatial memory."""

__version__ = "0.1.0"
