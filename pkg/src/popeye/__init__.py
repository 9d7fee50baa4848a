"""Multi-source ship detection toolkit: labeling, box geometry, answer codec,
a toy multimodal core, AP evaluation and box-prompted segmentation."""

__version__ = "0.1.0"
