"""Stochastic-precision self-distillation for quantized neural networks."""

from .losses import DistillConfig, ce_loss, cs_grad, cs_loss, kl_grad, kl_loss, speq_kd_loss, speq_loss
from .network import CNN5, MLP, ResNetSmall, build_model, forward_with_bits, load_checkpoint, precision_sweep, save_checkpoint
from .optim import SGD, ParamGroup
from .quant import FP, ActQuantizer, WeightQuantizer, act_alpha_init, lloyd_init_alpha_w, quantize_act, quantize_weight
from .tensor import Tensor, backward, no_grad, softmax, softmax_t
from .trainer import (PrecisionPolicy, RunRecord, greedy_assignment, retrain_step, sample_assignment,
                      soft_label_diversity, speq_step, track_ratio)

__version__ = "0.1.0"
