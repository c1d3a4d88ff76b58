"""Mask-enhanced multi-scale 3-D segmentation for rotational ultrasound sweeps."""

from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
