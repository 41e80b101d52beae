"""Impression-space toolkit.

Encode images into per-channel activation statistics of a template CNN,
then decode, translate, and rank images by gradient-based optimization
and distance in that statistics space.
"""

__version__ = "0.1.0"
