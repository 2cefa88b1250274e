"""Contour-keypoint cardiac segmentation: keypoints, dual-ring GCN decoder, anatomy checks,
biplane volumes and the inter-model agreement gate."""

__version__ = "0.1.0"
