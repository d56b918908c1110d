"""Diffusion-derived abnormality heatmaps as an extra image channel, plus a
dual encoder trained with an image-text-class hybrid contrastive loss.

Everything runs on a synthetic chest-radiograph stand-in with ground-truth
anomaly masks, so each stage can be measured.
"""

__version__ = "0.1.0"
