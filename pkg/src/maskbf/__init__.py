"""Mask-based beamformers: twelve filter-estimation variations, mask-based scaling
and per-utterance gradient search for optimal masks."""

from .beamformers import (ALL_VARIATIONS, NINE_VARIATIONS, CovarianceStack, FilterBank,
                          VariationSpec, estimate_filter, ideal_mmse, mldr_alternate,
                          sibf_noise_mask, steering_vector)
from .errors import *  # noqa: F401,F403
from .masks import MaskBuffer, MaskConstraint, MaskParameterSet, assemble_covariance
from .metrics import SdrResult, sdr
from .optimize import (OptimizationConfig, RunRecord, optimize_filter_masks,
                       optimize_joint, optimize_scaling_mask)
from .scaling import (ScalingSpec, scale_ban, scale_ideal, scale_mask_based, scale_mdp,
                      scale_rtf, scale_swf)
from .signal import (MultichannelWave, Scenario, Spectrogram, StftConfig, istft,
                     mix_scenario, stft, synth_scene)

__version__ = "0.1.0"
