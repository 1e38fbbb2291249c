"""Normalizing flows on incomplete data: MC-EM training and PL-MCMC conditional sampling."""
from .data import Dataset, MaskSpec, apply_mask, load_csv, whiten, unwhiten
from .estimators import NICEFlow, PLMCMCImputer
from .flow import FlowModel, build_flow, forward, inverse, log_prob, sample, sample_prior
from .grad import Adamax, RMSprop, nll_and_grad, train
from .mcem import McemConfig, mcem_train
from .sampler import (UNIFORM, MaskedSample, SamplerConfig, conditional_mean, plmcmc_step,
                      run_chain, run_gibbs, sample_conditional)

__version__ = "0.1.0"

__all__ = [
    "Adamax", "Dataset", "FlowModel", "MaskSpec", "MaskedSample", "McemConfig", "NICEFlow",
    "PLMCMCImputer", "RMSprop", "SamplerConfig", "UNIFORM", "apply_mask", "build_flow",
    "conditional_mean", "forward", "inverse", "load_csv", "log_prob", "mcem_train",
    "nll_and_grad", "plmcmc_step", "run_chain", "run_gibbs", "sample", "sample_conditional",
    "sample_prior", "train", "unwhiten", "whiten",
]
