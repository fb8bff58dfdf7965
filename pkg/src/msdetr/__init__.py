"""Multispectral pedestrian detection with loosely coupled cross-modal fusion.

A desk-scale detector that reads a visible and a thermal image, extracts a
feature pyramid per modality, and decodes three prediction sets (visible,
fused, thermal) from shared queries. The fused set draws on both pyramids by
sampling a few learned points per modality and normalizing their attention
weights jointly, so misaligned modalities never need a dense per-pixel merge.

Submodules
----------
numeric      bilinear sampling, softmax, finite-difference gradient checks
backbone     per-modality convolutional pyramid and deformable encoder
msca         multi-modal cross-attention and sampling-point dumps
decoder      trident decoder, detection heads, fusion-strategy detectors
matching     Hungarian assignment and shared-permutation selection
losses       focal / L1 / GIoU losses and instance-wise branch weights
metrics      log-average miss rate, AP, detection and curve files
synthscene   synthetic paired-modality scenes and dataset files
harness      training, evaluation, ablation and point dumps
"""
from .config import ExperimentConfig
from .decoder import BRANCHES, DetectionSet, build_model, infer
from .numeric import DomainError

__all__ = ["BRANCHES", "DetectionSet", "DomainError", "ExperimentConfig", "build_model", "infer"]
__version__ = "0.1.0"
