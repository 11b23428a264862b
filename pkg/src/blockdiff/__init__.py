"""Desk-scale masked-diffusion language model lab: on-policy training and soft parallel decoding."""

from .vocab import Example, TokenSequence, Vocabulary
from .model import (BlockAttentionPlan, DiffusionTransformer, EmbeddingTable, ModelConfig, ModelOutput,
                    build_attention_plan)
from .corruption import CorruptedSequence, NoiseSpec, mask_corrupt, sample_noise_level, uniform_corrupt
from .training import LossReport, TrainConfig, Trainer, mdlm_loss, rollout_predicted_sequence, train, udlm_loss
from .decoding import (BlockState, DecodeConfig, DecodeTrace, SoftState, generate, make_hybrid_embedding,
                       promote_prefix, spd_decode_block, threshold_baseline_decode_block,
                       uniform_refine_decode_block)
from .tasks import TaskSpec, generate_task_dataset, score_response, self_distill, task_vocabulary
from .checkpoint import load_checkpoint, save_checkpoint
from .harness import EvalReport, ablate, evaluate, sweep

__version__ = "0.1.0"
