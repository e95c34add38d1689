"""Dual-prompt 3D segmentation: a context prompt modulates the backbone, a target prompt generates the head."""
from .adaptation import apply_lora, late_fusion, predict_risk
from .inference import segment
from .metrics import concordance_index, dice_score
from .model import DualPromptModel, ModelConfig, load_checkpoint, save_checkpoint
from .text import TextEncoder, make_prompt, serialize_ehr
from .volume_io import Mask, Modality, Volume, load_volume, preprocess, save_volume

__version__ = "0.1.0"
