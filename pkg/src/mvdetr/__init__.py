"""Desk-scale two-view self-supervised pretraining for DETR-style detectors.

Submodules are imported lazily by callers; keeping this module empty of heavy
imports lets the CLI pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
