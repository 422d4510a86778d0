from .losses import EPS, adv_loss, content_adv_loss, cycle_loss, generator_adv_loss
from .model import (
    DrstArch,
    DrstBundle,
    DrstOptimizers,
    LossWeights,
    TranslationResult,
    drst_eval_losses,
    drst_train_step,
    make_optimizers,
    translate,
    translate_step1,
    translate_step2,
)
