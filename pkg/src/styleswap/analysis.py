"""Attention-map extraction, toy metric oracles, and the swap-layer sweep.

The metric oracles stand in for large pretrained embedding networks:
style is a fixed descriptor (joint color histogram + Gram statistics of a
frozen random conv bank), content is a small committed classifier trained on
the procedural dataset, diversity is mean pairwise distance in the conv
feature space. Each oracle must pass its self-validation gate (>= 95% on raw
procedural data) before any sweep result is trusted; the sweep refuses to run
otherwise. Every report header records the substitution and the oracle
checkpoint hash.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .numerics import attention_weights
from .scheduler import NoiseSchedule, SamplerConfig, sample
from .swap import (ReferenceSource, StyledRun, SwapPolicy, run_reference,
                   run_styled, verify_locality)
from .unet import Condition

ORACLE_SUBSTITUTION_NOTE = (
    "style/content/diversity oracles are toy descriptors and a small committed "
    "classifier standing in for DINO/CLIP/LPIPS embeddings"
)
_BANK_SEED = 7
_BANK_FILTERS = 8
_HIST_BINS = 8
DEFAULT_ORACLE_ASSET = "content_oracle.ckpt"
DEFAULT_MAP_STEP = 20  # denoising step index at which maps are reported


# ---------------------------------------------------------------------------
# style descriptor / diversity


def _conv_bank() -> torch.Tensor:
    gen = torch.Generator().manual_seed(_BANK_SEED)
    w = torch.randn(_BANK_FILTERS, 3, 3, 3, generator=gen) / math.sqrt(27.0)
    return w


_BANK = _conv_bank()


def conv_features(image: torch.Tensor) -> torch.Tensor:
    """Frozen random conv-bank responses [filters, H, W] of one [3, H, W] image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {tuple(image.shape)}")
    x = image.unsqueeze(0).to(torch.float32)
    return torch.nn.functional.conv2d(x, _BANK, padding=1)[0]


def style_descriptor(image: torch.Tensor) -> torch.Tensor:
    """Concatenated (joint 8^3 color histogram, conv-bank Gram matrix), each half unit-norm."""
    bins = torch.clamp(((image.clamp(-1, 1) + 1) / 2 * _HIST_BINS).long(), max=_HIST_BINS - 1)
    flat = (bins[0] * _HIST_BINS + bins[1]) * _HIST_BINS + bins[2]
    hist = torch.bincount(flat.reshape(-1), minlength=_HIST_BINS ** 3).to(torch.float32)
    hist = hist / hist.sum()

    feats = conv_features(image)
    f = feats.reshape(_BANK_FILTERS, -1)
    gram = (f @ f.T) / f.shape[1]

    def unit(v):
        n = torch.linalg.vector_norm(v)
        return v / n if n > 0 else v

    return torch.cat([unit(hist), unit(gram.reshape(-1))])


def style_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity of style descriptors, in [-1, 1]."""
    da, db = style_descriptor(a), style_descriptor(b)
    denom = torch.linalg.vector_norm(da) * torch.linalg.vector_norm(db)
    return float(torch.dot(da, db) / denom)


def diversity(images: Sequence[torch.Tensor]) -> float:
    """Mean pairwise RMS distance in the conv-bank feature space; 0 for < 2 images."""
    if len(images) < 2:
        return 0.0
    feats = [conv_features(img).reshape(-1) for img in images]
    scale = math.sqrt(feats[0].numel())
    dists = [
        float(torch.linalg.vector_norm(feats[i] - feats[j])) / scale
        for i in range(len(feats))
        for j in range(i + 1, len(feats))
    ]
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# content oracle


class ContentOracleNet(nn.Module):
    """Small grayscale shape classifier; trained once and committed with the repo."""

    def __init__(self, num_classes: int = 6):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.GroupNorm(4, 16), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GroupNorm(4, 32), nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.GroupNorm(4, 32), nn.SiLU(),
            nn.Flatten(),
            nn.Linear(32 * 4 * 4, 64), nn.SiLU(),
            nn.Linear(64, num_classes),
        )

    def forward(self, gray):
        return self.net(gray)


_ORACLE_CACHE = {}


def oracle_asset_path() -> Path:
    return Path(__file__).parent / "assets" / DEFAULT_ORACLE_ASSET


def load_content_oracle(path=None) -> ContentOracleNet:
    path = Path(path) if path is not None else oracle_asset_path()
    key = str(path.resolve())
    if key not in _ORACLE_CACHE:
        tensors, meta = checkpoint.load_tensors(path)
        net = ContentOracleNet(num_classes=int(meta.get("num_classes", 6)))
        net.load_state_dict(tensors, strict=True)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        _ORACLE_CACHE[key] = net
    return _ORACLE_CACHE[key]


def content_probs(images: torch.Tensor, oracle: Optional[ContentOracleNet] = None) -> torch.Tensor:
    """Class probabilities for [3,H,W] or [N,3,H,W] images (grayscale is the mean channel)."""
    if oracle is None:
        oracle = load_content_oracle()
    single = images.ndim == 3
    if single:
        images = images.unsqueeze(0)
    gray = images.to(torch.float32).mean(dim=1, keepdim=True)
    with torch.no_grad():
        probs = torch.softmax(oracle(gray), dim=-1)
    return probs[0] if single else probs


def content_alignment(image: torch.Tensor, content_id: int,
                      oracle: Optional[ContentOracleNet] = None) -> float:
    """Oracle probability that the image shows the expected content category."""
    probs = content_probs(image, oracle)
    if not 0 <= content_id < probs.shape[-1]:
        raise ValueError(f"content_id {content_id} out of range")
    return float(probs[content_id])


def leakage(image: torch.Tensor, ref_content: int, orig_content: int,
            oracle: Optional[ContentOracleNet] = None) -> float:
    """Probability mass on the reference's content relative to the original's.

    p_ref / (p_ref + p_orig) in [0, 1]; defined as 0 when the categories
    coincide (nothing foreign can leak).
    """
    if ref_content == orig_content:
        return 0.0
    probs = content_probs(image, oracle)
    p_ref, p_orig = float(probs[ref_content]), float(probs[orig_content])
    total = p_ref + p_orig
    return p_ref / total if total > 0 else 0.5


# ---------------------------------------------------------------------------
# oracle gates


@dataclass(frozen=True)
class GateResult:
    style_accuracy: float
    content_accuracy: float
    n_images: int
    threshold: float = 0.95

    @property
    def passed(self) -> bool:
        return (self.style_accuracy >= self.threshold
                and self.content_accuracy >= self.threshold)


def oracle_gates(dataset, oracle: Optional[ContentOracleNet] = None,
                 threshold: float = 0.95) -> GateResult:
    """Self-validate both oracles on raw procedural data.

    Style: nearest-centroid classification in descriptor space. Content:
    classifier top-1. Both must reach the threshold before metric runs mean
    anything.
    """
    descs = torch.stack([style_descriptor(img) for img in dataset.images])
    num_styles = int(dataset.style_ids.max()) + 1
    centroids = torch.stack([
        descs[dataset.style_ids == s].mean(dim=0) for s in range(num_styles)
    ])
    centroids = centroids / torch.linalg.vector_norm(centroids, dim=1, keepdim=True)
    normed = descs / torch.linalg.vector_norm(descs, dim=1, keepdim=True)
    style_pred = (normed @ centroids.T).argmax(dim=1)
    style_acc = float((style_pred == dataset.style_ids).float().mean())

    probs = content_probs(dataset.images, oracle)
    content_acc = float((probs.argmax(dim=1) == dataset.content_ids).float().mean())
    return GateResult(style_acc, content_acc, len(dataset), threshold)


def require_gates(dataset, oracle: Optional[ContentOracleNet] = None,
                  threshold: float = 0.95) -> GateResult:
    gate = oracle_gates(dataset, oracle, threshold)
    if not gate.passed:
        raise RuntimeError(
            f"oracle gates failed (style {gate.style_accuracy:.3f}, "
            f"content {gate.content_accuracy:.3f}, need >= {threshold}); "
            "metric runs are not trustworthy"
        )
    return gate


# ---------------------------------------------------------------------------
# attention maps


@dataclass(frozen=True)
class AttentionMap:
    ordinal: int
    step: int
    map: torch.Tensor  # [n_q, n_k], head-averaged, rows sum to 1

    def __post_init__(self):
        rows = self.map.sum(dim=1)
        if not torch.allclose(rows, torch.ones_like(rows), atol=1e-5):
            raise ValueError("attention map rows must sum to 1 within 1e-5")


def attention_map(run: StyledRun, ordinal: int, step: int = DEFAULT_MAP_STEP,
                  *, num_heads: int) -> AttentionMap:
    """Head-averaged map of the queries actually attended against the (possibly
    swapped) keys at one layer and step. Averaging happens after the per-head
    softmax so rows stay stochastic."""
    if run.attn_records is None:
        raise ValueError("styled run was made without record_attention=True")
    entry = run.attn_records.get((step, ordinal))
    if entry is None:
        raise ValueError(f"no attention trace for step {step}, layer ordinal {ordinal}")
    per_head = attention_weights(entry["q"], entry["k"], num_heads=num_heads)
    return AttentionMap(ordinal=ordinal, step=step, map=per_head.mean(dim=0))


def region_averaged_map(amap, query_mask: torch.Tensor) -> torch.Tensor:
    """Mean over the masked query rows -> a length-n_k distribution."""
    map2d = amap.map if isinstance(amap, AttentionMap) else amap
    mask = query_mask.reshape(-1).to(torch.bool)
    if mask.shape[0] != map2d.shape[0]:
        raise ValueError(
            f"mask selects over {mask.shape[0]} queries, map has {map2d.shape[0]}"
        )
    if not mask.any():
        raise ValueError("query mask selects no points")
    return map2d[mask].mean(dim=0)


def render_heatmap(map2d: torch.Tensor, scale: int = 1) -> bytes:
    """Grayscale PNG of a 2-D map, min-max normalized (max cell brightest)."""
    from PIL import Image

    arr = map2d.detach().to(torch.float64).cpu().numpy()
    if arr.ndim == 1:
        side = int(round(math.sqrt(arr.shape[0])))
        if side * side == arr.shape[0]:
            arr = arr.reshape(side, side)
        else:
            arr = arr.reshape(1, -1)
    lo, hi = float(arr.min()), float(arr.max())
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    img8 = np.round(norm * 255).astype(np.uint8)
    if scale > 1:
        img8 = np.kron(img8, np.ones((scale, scale), dtype=np.uint8))
    buf = io.BytesIO()
    Image.fromarray(img8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation grid and metric reports


@dataclass(frozen=True)
class EvalPair:
    ref_content: int
    ref_style: int
    orig_content: int
    ref_seed: int
    orig_seed: int


def make_eval_grid(num_refs: int = 4, contents_per_ref: int = 5,
                   num_content_classes: int = 6, base_seed: int = 100) -> tuple:
    """Pinned reference/content pairs; reference content never equals the
    original content, so leakage is always well-defined."""
    pairs = []
    for j in range(num_refs):
        ref_style = j
        ref_content = (j + 1) % num_content_classes
        for c in range(contents_per_ref):
            orig = c if c != ref_content else contents_per_ref
            pairs.append(EvalPair(
                ref_content=ref_content, ref_style=ref_style, orig_content=orig,
                ref_seed=base_seed + 1000 + j, orig_seed=base_seed + len(pairs),
            ))
    return tuple(pairs)


def grid_manifest_hash(grid) -> str:
    payload = json.dumps([asdict(p) for p in grid], sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class MetricReport:
    style_similarity: float
    content_alignment: float
    diversity: float
    leakage: float
    n_pairs: int
    seed_manifest_hash: str
    style_similarity_values: tuple = ()

    @property
    def style_similarity_se(self) -> float:
        vals = np.asarray(self.style_similarity_values, dtype=np.float64)
        if vals.size < 2:
            return 0.0
        return float(vals.std(ddof=1) / math.sqrt(vals.size))


def _unique_refs(grid):
    seen = {}
    for pair in grid:
        seen.setdefault((pair.ref_content, pair.ref_style, pair.ref_seed), []).append(pair)
    return seen


def evaluate_policies(model, schedule: NoiseSchedule, config: SamplerConfig,
                      policies: Sequence[SwapPolicy], grid,
                      oracle: Optional[ContentOracleNet] = None) -> dict:
    """Run every (pair, policy) cell of the grid; returns {policy mode: MetricReport}.

    References are captured once per unique reference and reused across
    policies; diversity is averaged over groups of styled images that share
    an original content category.
    """
    if not grid:
        raise ValueError("empty evaluation grid")
    need_q = any(p.mode == "shared_adain" for p in policies)
    grid_hash = grid_manifest_hash(grid)
    per_policy = {p.mode: {"sim": [], "align": [], "leak": [], "by_content": {}}
                  for p in policies}

    for (ref_content, ref_style, ref_seed), pairs in _unique_refs(grid).items():
        ref_cond = Condition(content_id=ref_content, style_id=ref_style)
        ref_cfg = replace(config, rng_seed=ref_seed)
        ref_img, captured = run_reference(
            model, ReferenceSource(cond=ref_cond), ref_cfg, schedule, capture_q=need_q
        )
        for pair in pairs:
            orig_cond = Condition(content_id=pair.orig_content)
            orig_cfg = replace(config, rng_seed=pair.orig_seed)
            for policy in policies:
                styled = run_styled(model, orig_cond, captured, policy, orig_cfg, schedule)
                acc = per_policy[policy.mode]
                acc["sim"].append(style_similarity(styled.image, ref_img))
                acc["align"].append(
                    content_alignment(styled.image, pair.orig_content, oracle)
                )
                acc["leak"].append(
                    leakage(styled.image, pair.ref_content, pair.orig_content, oracle)
                )
                acc["by_content"].setdefault(pair.orig_content, []).append(styled.image)

    reports = {}
    for policy in policies:
        acc = per_policy[policy.mode]
        groups = [imgs for imgs in acc["by_content"].values() if len(imgs) >= 2]
        div = float(np.mean([diversity(imgs) for imgs in groups])) if groups else 0.0
        reports[policy.mode] = MetricReport(
            style_similarity=float(np.mean(acc["sim"])),
            content_alignment=float(np.mean(acc["align"])),
            diversity=div,
            leakage=float(np.mean(acc["leak"])),
            n_pairs=len(acc["sim"]),
            seed_manifest_hash=grid_hash,
            style_similarity_values=tuple(acc["sim"]),
        )
    return reports


# ---------------------------------------------------------------------------
# start-layer sweep


@dataclass(frozen=True)
class SweepResult:
    rows: tuple                  # (s, MetricReport) ascending in s
    selected_s: int
    knee_frac: float
    leakage_ceiling: float
    grid_hash: str
    gate: GateResult
    locality_checks: int         # tensors compared across all sweep points

    def row(self, s: int) -> MetricReport:
        for row_s, report in self.rows:
            if row_s == s:
                return report
        raise KeyError(s)


def select_knee(rows, knee_frac: float, leakage_ceiling: float) -> int:
    """Largest s whose style similarity keeps knee_frac of the all-upblocks value
    while leakage stays under the ceiling."""
    base = rows[0][1].style_similarity
    candidates = [
        s for s, rep in rows
        if rep.style_similarity >= knee_frac * base and rep.leakage <= leakage_ceiling
    ]
    if not candidates:
        raise RuntimeError(
            f"no start ordinal satisfies the knee rule (frac={knee_frac}, "
            f"ceiling={leakage_ceiling}); rows: "
            + ", ".join(f"s={s}: sim={r.style_similarity:.3f}, leak={r.leakage:.3f}"
                        for s, r in rows)
        )
    return max(candidates)


def sweep_start_layer(model, grid, config: SamplerConfig, schedule: NoiseSchedule,
                      gate_dataset, knee_frac: float = 0.9,
                      leakage_ceiling: float = 0.6,
                      oracle: Optional[ContentOracleNet] = None,
                      check_locality: bool = True) -> SweepResult:
    """Evaluate swap_kv at every up-section start ordinal (plus the empty set
    one past the end) on the pinned grid, verify the locality invariant at
    each sweep point, and select the knee."""
    if not grid:
        raise ValueError("empty evaluation grid")
    gate = require_gates(gate_dataset, oracle)
    ups = [lid.ordinal for lid in model.layer_ids if lid.address.section == "up"]
    s_values = list(range(ups[0], ups[-1] + 2))
    grid_hash = grid_manifest_hash(grid)

    per_s = {s: {"sim": [], "align": [], "leak": [], "by_content": {}} for s in s_values}
    locality_checks = 0
    for (ref_content, ref_style, ref_seed), pairs in _unique_refs(grid).items():
        ref_cond = Condition(content_id=ref_content, style_id=ref_style)
        ref_cfg = replace(config, rng_seed=ref_seed)
        ref_img, captured = run_reference(
            model, ReferenceSource(cond=ref_cond), ref_cfg, schedule
        )
        for pair_index, pair in enumerate(pairs):
            orig_cond = Condition(content_id=pair.orig_content)
            orig_cfg = replace(config, rng_seed=pair.orig_seed)
            for s in s_values:
                policy = SwapPolicy(mode="swap_kv", start_ordinal=s)
                record = check_locality and pair_index == 0
                styled = run_styled(model, orig_cond, captured, policy, orig_cfg,
                                    schedule, record_locality=record)
                if record:
                    locality_checks += verify_locality(
                        model, styled, orig_cond, orig_cfg, schedule
                    )
                acc = per_s[s]
                acc["sim"].append(style_similarity(styled.image, ref_img))
                acc["align"].append(
                    content_alignment(styled.image, pair.orig_content, oracle)
                )
                acc["leak"].append(
                    leakage(styled.image, pair.ref_content, pair.orig_content, oracle)
                )
                acc["by_content"].setdefault(pair.orig_content, []).append(styled.image)

    rows = []
    for s in s_values:
        acc = per_s[s]
        groups = [imgs for imgs in acc["by_content"].values() if len(imgs) >= 2]
        div = float(np.mean([diversity(imgs) for imgs in groups])) if groups else 0.0
        rows.append((s, MetricReport(
            style_similarity=float(np.mean(acc["sim"])),
            content_alignment=float(np.mean(acc["align"])),
            diversity=div,
            leakage=float(np.mean(acc["leak"])),
            n_pairs=len(acc["sim"]),
            seed_manifest_hash=grid_hash,
            style_similarity_values=tuple(acc["sim"]),
        )))
    selected = select_knee(rows, knee_frac, leakage_ceiling)
    return SweepResult(
        rows=tuple(rows), selected_s=selected, knee_frac=knee_frac,
        leakage_ceiling=leakage_ceiling, grid_hash=grid_hash, gate=gate,
        locality_checks=locality_checks,
    )


SWEEP_CSV_HEADER = "s,style_similarity,content_alignment,diversity,leakage,n_pairs,seed_manifest_hash"


def write_sweep_csv(result: SweepResult, path) -> None:
    lines = [SWEEP_CSV_HEADER]
    for s, rep in result.rows:
        lines.append(
            f"{s},{rep.style_similarity:.8f},{rep.content_alignment:.8f},"
            f"{rep.diversity:.8f},{rep.leakage:.8f},{rep.n_pairs},{rep.seed_manifest_hash}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def plot_sweep(result: SweepResult, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s_vals = [s for s, _ in result.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for field, marker in (("style_similarity", "o"), ("content_alignment", "s"),
                          ("diversity", "^"), ("leakage", "x")):
        ax.plot(s_vals, [getattr(rep, field) for _, rep in result.rows],
                marker=marker, label=field)
    ax.axvline(result.selected_s, color="red", linestyle="--",
               label=f"selected s={result.selected_s}")
    ax.set_xlabel("swap start ordinal s")
    ax.set_ylabel("grid mean")
    ax.set_xticks(s_vals)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report_header(extra: Optional[dict] = None) -> dict:
    """Common JSON header: oracle provenance + substitution note."""
    header = {
        "substitution": ORACLE_SUBSTITUTION_NOTE,
        "attention_map_averaging": "per-head maps averaged after softmax "
                                   "(keeps rows stochastic)",
        "oracle_checkpoints": {},
    }
    path = oracle_asset_path()
    if path.exists():
        header["oracle_checkpoints"][DEFAULT_ORACLE_ASSET] = checkpoint.file_sha256(path)
    if extra:
        header.update(extra)
    return header


def cfg_directional_check(model, schedule: NoiseSchedule, config: SamplerConfig,
                          num_contents: int = 6, seeds_per_content: int = 10,
                          w_low: float = 0.0, w_high: float = 7.0,
                          oracle: Optional[ContentOracleNet] = None,
                          base_seed: int = 5000):
    """Classifier accuracy of generated samples at two guidance scales on the
    pinned grid; returns (accuracy at w_low, accuracy at w_high)."""
    accs = []
    for w in (w_low, w_high):
        hits = 0
        total = 0
        for c in range(num_contents):
            for k in range(seeds_per_content):
                cfg = replace(config, guidance_scale=w, rng_seed=base_seed + 97 * c + k)
                result = sample(model, Condition(content_id=c), cfg, schedule)
                probs = content_probs(result.image, oracle)
                hits += int(int(probs.argmax()) == c)
                total += 1
        accs.append(hits / total)
    return tuple(accs)
