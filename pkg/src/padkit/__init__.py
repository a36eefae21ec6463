"""padkit: patch-stitching face presentation attack detection toolkit.

Faces are aligned to 224x224, decomposed into a 7x7 grid of 32x32 patches,
recombined into composite training images with 14x14 binary label maps, and
used to train a map-producing CNN with pixel-wise BCE. Evaluation follows
ISO/IEC 30107-3 (APCER/BPCER/ACER/HTER) with EER-calibrated thresholds.
"""

__version__ = "0.1.0"
