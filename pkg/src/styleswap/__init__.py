"""Training-free style prompting for a toy diffusion model.

A reference denoising process is run once and its self-attention key/value
features are recorded per step and per layer; the original process then
attends its own queries against the reference's keys/values in a chosen set
of up-section layers, transferring style while keeping content. Everything
runs at desk scale on CPU: the model, dataset, metric oracles, and the
layer-range sweep are all part of the package.
"""

from .checkpoint import load_model, load_tensors, save_model, save_tensors
from .numerics import adain, attention, attention_weights, softmax_rows
from .scheduler import (NoiseSchedule, SamplerConfig, add_noise, cfg_combine,
                        ddim_invert, ddim_step, inference_timesteps,
                        make_schedule, sample, stochastic_invert)
from .swap import (CapturedFeatures, ReferenceSource, StyledRun, SwapPolicy,
                   resolve_layer_set, run_reference, run_styled,
                   shared_attention_step, verify_locality)
from .toytrain import (ToyDataset, ToyDatasetSpec, TrainConfig, generate_dataset,
                       grad_check, train)
from .unet import (BlockAddress, Condition, LayerId, ModelSpec, NULL_CONDITION,
                   UNet, build_model, enumerate_self_attention)

__version__ = "0.1.0"
