"""Framework-free 3D convolutional networks for volumetric MRI classification.

Layers with hand-paired forward/backward kernels, Adam training with L2 and
dropout, 2-class to 3-class head transfer, F2/Fisher evaluation and
occlusion heatmaps, plus a synthetic lesion dataset for desk-scale checks.
"""
__version__ = "0.1.0"
