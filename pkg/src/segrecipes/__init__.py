"""Training recipes for long-tailed per-pixel segmentation."""
