"""Multi-reconstruction data augmentation for volumetric brain segmentation.

Synthetic phantoms, a slice-acquisition forward model, regularised
super-resolution reconstruction, rigid registration, a classical segmenter
with cross-validation, and the metrics and statistics used to compare
training configurations.
"""

__version__ = "0.1.0"
