"""Desk-scale coarse-to-fine audiovisual alignment.

Two-stage pipeline on procedurally generated scenes: a multi-task
classification + correspondence stage, then class-specific feature
disentanglement and contrastive sound-object alignment. Downstream heads
produce per-class sound localization maps and visually guided source
separation.
"""

__version__ = "0.1.0"
