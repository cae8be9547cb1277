"""Signed distance fields on adaptive Delaunay tetrahedral grids."""
