"""Volumetric residual classifiers with 3D deformable convolutions, in numpy."""

__version__ = "0.1.0"
