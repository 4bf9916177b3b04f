"""Desk-scale unified 3D point-cloud segmentation.

Semantic, instance, and panoptic segmentation over synthetic room scenes,
driven by offline multimodal (description + image) reference queries, with a
self-contained float64 autodiff core.
"""

__version__ = "0.1.0"
