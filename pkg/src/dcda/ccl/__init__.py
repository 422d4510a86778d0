from .losses import ccl_loss, seg_loss
from .model import (
    Ablations,
    CclBatchWiring,
    joint_loss,
    needed_outputs,
    predict,
    probs_to_mask,
    teacher_only_outputs,
    wire_batch,
)
from .unet import Role, SegModel
