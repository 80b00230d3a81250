"""Desk-scale 4D radar / LiDAR fusion 3D object detection.

Every differentiable op ships with a finite-difference check and every
geometric routine with a brute-force oracle in the test suite.
"""

__all__ = ["FusionDetector"]
__version__ = "0.1.0"


def __getattr__(name):
    if name == "FusionDetector":
        from .estimator import FusionDetector
        return FusionDetector
    raise AttributeError(name)
