"""Self-supervised student/teacher representation learning for retinal-image grading.

A desk-scale, numpy-backed implementation of DINO-style self-distillation:
a from-scratch reverse-mode autodiff tensor core, a configurable ViT
backbone with multi-CLS tokens, a local-to-global multi-crop augmentation
pipeline, the EMA-teacher training loop with centering and sharpening, and
linear-probe / k-NN / attention-map evaluation protocols.
"""

__version__ = "0.1.0"
