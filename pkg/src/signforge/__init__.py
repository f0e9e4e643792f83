"""signforge: ASL fingerspelling recognition from camera frames.

From-scratch CNN kernels and architecture blocks, miniature trainable models,
a dataset/training/comparison pipeline, and a real-time recognition service
with a browser client.
"""

__version__ = "0.1.0"

CLASSES = [c for c in "ABCDEFGHIKLMNOPQRSTUVWXY"]  # 24 static letters, no J/Z
