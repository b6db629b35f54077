"""Dual-prompt open-vocabulary segmentation at desk scale."""
from .container import load_container, save_container
from .costvolume import (compute_cost_volume, compute_visual_cost_volume, embed_cost_volume,
                         fuse_cost_volumes, fuse_prompts)
from .decoder import (CostVolumeGuidedDecoder, DecoderConfig, SegmentationResult, bce_loss,
                      decode, grad_check, train_step)
from .promptbank import (CategorySet, PromptDims, PromptEmbeddings, TemplateBank,
                         add_prompt_noise, load_template_bank, render_prompts,
                         synthetic_prompt_provider)

__version__ = "0.1.0"
