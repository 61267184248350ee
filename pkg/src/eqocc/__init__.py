"""Equivariant occupancy networks: reconstruction of occupancy fields from
sparse, noisy, unoriented point clouds with an SE(3)-equivariant attention
encoder/decoder."""

__version__ = "0.1.0"
