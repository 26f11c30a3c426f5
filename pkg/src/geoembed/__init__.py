"""Coordinate-based geographic embeddings from polygon attribute data.

Builds p x p x d data cuboids around locations by sampling rotated neighbor
grids over polygon regions, trains convolutional autoencoders (full-cuboid
and center-prediction variants) on them with a from-scratch tensor engine,
and evaluates the resulting embeddings intrinsically (spatial smoothness,
saturation) and extrinsically (Poisson GLM/GAM frequency models).
"""

__version__ = "0.1.0"
