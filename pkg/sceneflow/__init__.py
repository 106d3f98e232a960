"""Sparse scene flow engine: voxel fusion, sparse U-Net and flow metrics."""
