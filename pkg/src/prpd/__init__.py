"""Progressive-resolution policy distillation for a voxel excavation task."""

__version__ = "0.1.0"
