"""Real-time fetal brain segmentation on 2D MRI slices: U-Net and voxelwise baselines."""

__version__ = "0.1.0"
