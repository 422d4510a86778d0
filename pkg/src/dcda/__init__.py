"""Unsupervised cross-domain vessel segmentation.

A style-transfer stage renders each domain's images in the other's style;
two segmentation models, one per domain, then train on the labelled source
images, their translations, and each other's predictions.
"""
from .ccl import Ablations, Role, SegModel, ccl_loss, joint_loss, predict, seg_loss, wire_batch
from .config import RunConfig
from .drst import DrstArch, DrstBundle, LossWeights, adv_loss, content_adv_loss, cycle_loss, translate
from .errors import (
    DcdaError,
    DegenerateError,
    ExhaustedError,
    LabelError,
    LayoutError,
    NonFiniteError,
    RangeError,
    ShapeError,
    StateError,
)
from .metrics import EvalResult, dice_score, evaluate, hd95, paired_ttest
from .types import ContentMap, DomainTag, ImageBatch, LossReport, Mask, ProbMap, Stage, StyleCode, TrainPhase

__version__ = "0.1.0"
