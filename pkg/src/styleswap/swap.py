"""Dual denoising processes with swapped self-attention features.

A reference process is denoised once with a recording hook, its per-step
per-layer K/V (optionally Q) captured; the original process is then re-run
with hooks that feed the captured features into a chosen set of
self-attention layers. The core policy keeps each layer's own queries and
attends them against the reference's keys/values; ablation policies widen
the layer set, and a shared-attention baseline concatenates rather than
replaces.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import torch

from . import checkpoint
from .numerics import Tensor, adain, attention
from .scheduler import (NoiseSchedule, SamplerConfig, SampleResult, ddim_invert,
                        inference_timesteps, sample, snap_to_timestep,
                        stochastic_invert)
from .unet import Condition, LayerId, NULL_CONDITION

POLICY_MODES = ("none", "swap_kv", "shared_adain", "swap_all", "swap_no_mid")
_RANGE_MODES = ("swap_kv", "shared_adain")
_NAME_RE = re.compile(r"^step(\d+)\.layer(\d+)\.([kvq])$")


@dataclass(frozen=True)
class SwapPolicy:
    """Which layers get reference features, and by which mechanism.

    ``swap_kv`` and ``shared_adain`` act on the contiguous suffix of
    up-section self-attention layers starting at ``start_ordinal`` (default:
    the whole up section), or on an explicit ``layers`` ordinal set.
    ``swap_all`` / ``swap_no_mid`` are fixed ablation sets; ``none`` is the
    vanilla process.
    """

    mode: str = "swap_kv"
    start_ordinal: Optional[int] = None
    layers: Optional[frozenset] = None

    def __post_init__(self):
        if self.mode not in POLICY_MODES:
            raise ValueError(f"unknown policy mode {self.mode!r}; options: {POLICY_MODES}")
        if self.mode not in _RANGE_MODES and (
            self.start_ordinal is not None or self.layers is not None
        ):
            raise ValueError(f"mode {self.mode!r} defines its own layer set")
        if self.start_ordinal is not None and self.layers is not None:
            raise ValueError("give either start_ordinal or an explicit layer set, not both")
        if self.layers is not None:
            object.__setattr__(self, "layers", frozenset(int(o) for o in self.layers))


def resolve_layer_set(model, policy: SwapPolicy) -> tuple:
    """Expand a policy into the concrete LayerIds it touches, ordinal-ordered."""
    all_layers = model.layer_ids
    if policy.mode == "none":
        return ()
    if policy.mode == "swap_all":
        return tuple(all_layers)
    if policy.mode == "swap_no_mid":
        return tuple(lid for lid in all_layers if lid.address.section != "mid")
    ups = [lid for lid in all_layers if lid.address.section == "up"]
    if policy.layers is not None:
        known = {lid.ordinal: lid for lid in all_layers}
        missing = sorted(policy.layers - known.keys())
        if missing:
            raise ValueError(f"no self-attention layers with ordinals {missing}")
        return tuple(known[o] for o in sorted(policy.layers))
    s = ups[0].ordinal if policy.start_ordinal is None else policy.start_ordinal
    if s > ups[-1].ordinal + 1:
        raise ValueError(
            f"start ordinal {s} beyond the last up-section ordinal {ups[-1].ordinal}"
        )
    return tuple(lid for lid in ups if lid.ordinal >= s)


class CapturedFeatures:
    """Immutable per-(step, layer) K/V (and optional Q) store from one reference run."""

    def __init__(self, features: Mapping, num_inference_steps: int):
        self._features = MappingProxyType(dict(features))
        self.num_inference_steps = int(num_inference_steps)
        self.step_indices = tuple(sorted({k[0] for k in self._features}))
        self.ordinals = tuple(sorted({k[1] for k in self._features}))
        self.has_q = all("q" in entry for entry in self._features.values()) and bool(
            self._features
        )
        for (i, l), entry in self._features.items():
            if i < 0 or i >= self.num_inference_steps:
                raise ValueError(f"captured step {i} outside 0..{self.num_inference_steps - 1}")
            if entry["k"].shape != entry["v"].shape:
                raise ValueError(f"k/v shape mismatch at step {i} layer {l}")

    def get(self, step_index: int, ordinal: int) -> dict:
        try:
            return self._features[(step_index, ordinal)]
        except KeyError:
            raise ValueError(
                f"no captured features for step {step_index}, layer ordinal {ordinal}"
            ) from None

    def covers(self, step_indices: Sequence[int], ordinals: Sequence[int]) -> bool:
        return all((i, l) in self._features for i in step_indices for l in ordinals)

    def num_floats(self) -> int:
        return sum(t.numel() for entry in self._features.values() for t in entry.values())

    def save(self, path) -> None:
        tensors = {}
        for (i, l), entry in sorted(self._features.items()):
            for part, tensor in sorted(entry.items()):
                tensors[f"step{i}.layer{l}.{part}"] = tensor
        meta = {"num_inference_steps": self.num_inference_steps}
        checkpoint.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "CapturedFeatures":
        tensors, meta = checkpoint.load_tensors(path)
        features = {}
        for name, tensor in tensors.items():
            m = _NAME_RE.match(name)
            if m is None:
                raise ValueError(f"{path}: unrecognized tensor name {name!r}")
            i, l, part = int(m.group(1)), int(m.group(2)), m.group(3)
            features.setdefault((i, l), {})[part] = tensor
        return cls(features, meta["num_inference_steps"])


@dataclass(frozen=True)
class ReferenceSource:
    """Either a synthetic reference (condition denoised from seeded noise) or a
    real image to be inverted (``method`` 'stochastic' or 'ddim') and re-denoised.

    For real images, ``cond`` is the condition used during inversion and
    re-denoising (null when absent); ``t_start`` overrides the config's
    default stochastic-inversion depth.
    """

    cond: Optional[Condition] = None
    image: Optional[Tensor] = None
    method: Optional[str] = None
    t_start: Optional[int] = None

    def __post_init__(self):
        if self.image is None:
            if self.cond is None:
                raise ValueError("synthetic reference requires a condition")
            if self.method is not None or self.t_start is not None:
                raise ValueError("inversion fields only apply to image references")
        else:
            if self.method not in ("stochastic", "ddim"):
                raise ValueError("image reference requires method 'stochastic' or 'ddim'")
            if self.t_start is not None and self.method != "stochastic":
                raise ValueError("t_start only applies to stochastic inversion")


class _CaptureRecorder:
    def __init__(self, ordinals, capture_q: bool):
        self.ordinals = frozenset(ordinals)
        self.capture_q = capture_q
        self.store = {}

    def hook_factory(self, step_index: int, t: int):
        def hook(layer_id: LayerId, q, k, v):
            if layer_id.ordinal in self.ordinals:
                entry = {"k": k.clone(), "v": v.clone()}
                if self.capture_q:
                    entry["q"] = q.clone()
                self.store[(step_index, layer_id.ordinal)] = entry
            return None

        return hook


def run_reference(model, source: ReferenceSource, config: SamplerConfig,
                  schedule: NoiseSchedule, capture_ordinals: Optional[Sequence[int]] = None,
                  capture_q: bool = False):
    """Denoise the reference process while recording self-attention features.

    Returns (reference image, CapturedFeatures). Synthetic references cover
    every inference step; inversion-based references cover the suffix of
    steps actually denoised. Features always come from the conditional CFG
    pass, so any swap_uncond setting is ignored during capture.
    """
    if capture_ordinals is None:
        capture_ordinals = [lid.ordinal for lid in model.layer_ids]
    recorder = _CaptureRecorder(capture_ordinals, capture_q)
    cfg = replace(config, swap_uncond=False)
    cond = source.cond if source.cond is not None else NULL_CONDITION

    if source.image is None:
        result = sample(model, cond, cfg, schedule, hook_factory=recorder.hook_factory)
    else:
        dtype = next(model.parameters()).dtype
        image = source.image.to(dtype)
        timesteps = inference_timesteps(schedule.T, cfg.num_inference_steps)
        if source.method == "stochastic":
            t_req = source.t_start
            if t_req is None:
                t_req = min(int(round(cfg.t_start_frac * schedule.T)), schedule.T - 1)
            if not 0 <= t_req < schedule.T:
                raise ValueError(f"t_start {t_req} outside the schedule [0, {schedule.T})")
            start_step, t_snap = snap_to_timestep(timesteps, t_req)
            rng = torch.Generator().manual_seed(cfg.rng_seed)
            x_init = stochastic_invert(image, t_snap, schedule, rng)
        else:
            x_init = ddim_invert(model, image, cond, cfg, schedule)
            start_step = 0
        result = sample(model, cond, cfg, schedule, hook_factory=recorder.hook_factory,
                        x_init=x_init, start_step=start_step)
    captured = CapturedFeatures(recorder.store, cfg.num_inference_steps)
    return result.image, captured


def shared_qkv(q, k, v, q_r, k_r, v_r):
    """Shared-attention merge: normalized Q/K plus concatenated reference K/V."""
    q2 = adain(q, q_r)
    k2 = torch.cat([adain(k, k_r), k_r], dim=0)
    v2 = torch.cat([v, v_r], dim=0)
    return q2, k2, v2


def shared_attention_step(q, k, v, q_r, k_r, v_r, num_heads: int = 1) -> Tensor:
    """Full shared-attention output for one layer (baseline comparison path)."""
    q2, k2, v2 = shared_qkv(q, k, v, q_r, k_r, v_r)
    return attention(q2, k2, v2, num_heads=num_heads)


@dataclass(frozen=True)
class StyledRun:
    image: Tensor
    result: SampleResult
    # (step_index, ordinal) -> {"q": ..., "k": ...} as actually attended (post-swap)
    attn_records: Optional[Mapping] = None
    # (step_index, ordinal) -> incoming q/k/v for down/mid layers (locality evidence)
    locality_records: Optional[Mapping] = None


def _styled_hook_factory(policy, layer_set, captured, covered_steps, recorder_store,
                         locality_store):
    wanted = {lid.ordinal for lid in layer_set}

    def factory(step_index: int, t: int):
        def hook(layer_id: LayerId, q, k, v):
            if locality_store is not None and layer_id.address.section != "up":
                locality_store[(step_index, layer_id.ordinal)] = {
                    "q": q.clone(), "k": k.clone(), "v": v.clone()
                }
            if layer_id.ordinal not in wanted or step_index not in covered_steps:
                return None
            entry = captured.get(step_index, layer_id.ordinal)
            k_r = entry["k"].to(q.dtype)
            v_r = entry["v"].to(q.dtype)
            if k_r.shape != k.shape:
                raise ValueError(
                    f"captured K shape {tuple(k_r.shape)} does not match layer "
                    f"{layer_id.ordinal}'s {tuple(k.shape)}"
                )
            if policy.mode == "shared_adain":
                q2, k2, v2 = shared_qkv(q, k, v, entry["q"].to(q.dtype), k_r, v_r)
            else:
                q2, k2, v2 = q, k_r, v_r
            if recorder_store is not None:
                recorder_store[(step_index, layer_id.ordinal)] = {
                    "q": q2.clone(), "k": k2.clone()
                }
            return (q2, k2, v2)

        return hook

    return factory


def run_styled(model, cond: Condition, captured: Optional[CapturedFeatures],
               policy: SwapPolicy, config: SamplerConfig, schedule: NoiseSchedule,
               record_attention: bool = False, record_locality: bool = False) -> StyledRun:
    """Denoise the original process, feeding captured reference features into
    the policy's layer set at every covered step.

    Captured steps must form a contiguous suffix of the inference range
    (a full capture for synthetic references; inversion-based captures start
    mid-trajectory and earlier steps run vanilla). Missing layers or gaps are
    hard errors before any sampling happens.
    """
    layer_set = resolve_layer_set(model, policy)
    n = config.num_inference_steps
    covered_steps = frozenset()
    if layer_set:
        if captured is None:
            raise ValueError(f"policy {policy.mode!r} requires captured features")
        if captured.num_inference_steps != n:
            raise ValueError(
                f"capture ran {captured.num_inference_steps} steps, config asks {n}"
            )
        steps = captured.step_indices
        if not steps or list(steps) != list(range(steps[0], n)):
            raise ValueError(
                f"captured steps {steps} are not a contiguous suffix of 0..{n - 1}"
            )
        need = [lid.ordinal for lid in layer_set]
        if not captured.covers(steps, need):
            have = set(captured.ordinals)
            raise ValueError(
                f"capture covers ordinals {sorted(have)}, policy needs {need}"
            )
        if policy.mode == "shared_adain" and not captured.has_q:
            raise ValueError("shared_adain needs captured queries (capture_q=True)")
        covered_steps = frozenset(steps)

    attn_store = {} if record_attention else None
    loc_store = {} if record_locality else None
    factory = None
    if layer_set or record_locality:
        factory = _styled_hook_factory(
            policy, layer_set, captured, covered_steps, attn_store, loc_store
        )
    result = sample(model, cond, config, schedule, hook_factory=factory)
    return StyledRun(
        image=result.image,
        result=result,
        attn_records=MappingProxyType(attn_store) if attn_store is not None else None,
        locality_records=MappingProxyType(loc_store) if loc_store is not None else None,
    )


def verify_locality(model, styled: StyledRun, cond: Condition, config: SamplerConfig,
                    schedule: NoiseSchedule) -> int:
    """Check that down/mid self-attention inputs of a styled run match a vanilla
    forward pass on the same per-step states bitwise. Returns the number of
    tensors compared; raises on any deviation.

    Up-section swaps act after the down/mid computation inside each forward
    pass, so equality here is exact, not approximate.
    """
    if styled.locality_records is None:
        raise ValueError("styled run was made without record_locality=True")
    compared = 0
    for rec in styled.result.steps:
        probe = {}

        def observer(layer_id, q, k, v, _step=rec.step_index, _probe=probe):
            if layer_id.address.section != "up":
                _probe[(_step, layer_id.ordinal)] = {
                    "q": q.clone(), "k": k.clone(), "v": v.clone()
                }
            return None

        with torch.no_grad():
            model(rec.x_t, rec.t, cond, hook=observer)
        for key, entry in probe.items():
            styled_entry = styled.locality_records.get(key)
            if styled_entry is None:
                raise ValueError(f"styled run recorded nothing for step/layer {key}")
            for part in ("q", "k", "v"):
                if not torch.equal(entry[part], styled_entry[part]):
                    raise AssertionError(
                        f"down/mid activation diverged at step/layer {key} ({part})"
                    )
                compared += 1
    return compared
