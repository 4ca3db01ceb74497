"""Adversarial fine-tuning of dual-encoder image-text models with
text-guided attention alignment (TGA-ZSR), at desk scale."""

from .attacks import AttackConfig, LossKind, cw_attack, pgd_attack, project, run_attack
from .attention import AttentionMap, AttentionSource, gradient_attention, text_guided_attention
from .data import ImageDataset, batches, load_manifest, synthetic_dataset, write_manifest
from .evaluation import EvalReport, attention_shift_report, robust_accuracy, strength_sweep, zero_shot_accuracy
from .model import (
    DualModelState,
    ImageBatch,
    ImageEncoding,
    MiniViT,
    TextEmbeddings,
    ViTConfig,
    classification_logits,
    encode_image,
    encode_text,
)
from .training import (
    LossWeights,
    TrainConfig,
    attention_refinement_loss,
    contrastive_ce_loss,
    finetune,
    finetune_step,
    map_distance,
    model_constraint_loss,
    total_loss,
)

__version__ = "0.1.0"
