"""Soft Graph Transformer MIMO detection toolkit."""

from .channel import (
    ComplexMimoSystem,
    Constellation,
    MimoInstance,
    hard_demap,
    lift_to_real,
    load_instances,
    make_rng,
    modulate,
    sample_batch,
    sample_instance,
    sample_rayleigh,
    save_instances,
    snr_to_sigma,
)
from .baselines import DetectorOutput, lmmse_detect, ml_detect, oamp_detect
from .network import (
    SgtConfig,
    SgtModel,
    detect_soft,
    detect_soft_batch,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .tokens import LLR_MAX, TokenSet, llr_to_prob, prob_to_llr, tokenize
from .training import (
    Adam,
    BerRecord,
    TrainConfig,
    TrainLog,
    evaluate_ber,
    train,
)

__version__ = "0.1.0"
