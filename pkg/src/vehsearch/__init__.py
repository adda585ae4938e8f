"""Language-conditioned vehicle segmentation and track retrieval on a small NumPy autodiff engine."""

__version__ = "0.1.0"
