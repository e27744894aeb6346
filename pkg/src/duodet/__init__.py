"""Desk-scale RGB + thermal-infrared object detection toolkit.

Dual-backbone detector with cross-modal attention fusion at three pyramid
scales, auxiliary supervision heads that exist only during training, paired
modality-aware augmentation, mAP evaluation and weighted-box-fusion
ensembling of detection files.
"""

__version__ = "0.1.0"
