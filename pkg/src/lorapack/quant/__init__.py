"""Numerical engines: SVD splitting, quantizers, STE refinement and bit accounting."""
