"""Material-labeled 3D semantic mapping from recorded RGB-D sequences."""
