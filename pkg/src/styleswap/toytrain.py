"""Procedural shape/style dataset and the small training loop.

Images are 32x32 RGB in [-1, 1], drawn as analytic signed-distance shapes
over styled backgrounds (palette + texture per style). Every sample is a
pure function of (dataset seed, content id, style id, index), so the dataset
is regenerated on demand and never persisted. Training minimizes the usual
eps-prediction MSE with condition dropout for classifier-free guidance.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .scheduler import NoiseSchedule, add_noise
from .unet import Condition, NULL_CONDITION

CONTENT_NAMES = ("circle", "square", "triangle", "cross", "ring", "bar")
STYLE_NAMES = (
    "ember-dots", "lagoon-hatch", "moss-grain", "dusk-gradient",
    "slate-checker", "reef-stripes",
)

# (background, foreground) RGB in [0, 1]; foregrounds are uniformly brighter
# than backgrounds so the grayscale content channel stays readable under any
# style's texture.
_PALETTES = (
    ((0.55, 0.08, 0.08), (0.95, 0.90, 0.20)),
    ((0.06, 0.10, 0.45), (0.30, 0.95, 0.95)),
    ((0.05, 0.32, 0.10), (0.95, 0.72, 0.85)),
    ((0.28, 0.05, 0.45), (0.98, 0.62, 0.15)),
    ((0.10, 0.10, 0.12), (0.92, 0.92, 0.90)),
    ((0.02, 0.28, 0.33), (0.92, 0.76, 0.26)),
)


@dataclass(frozen=True)
class ToyDatasetSpec:
    num_content: int = 6
    num_style: int = 6
    image_size: int = 32
    samples_per_cell: int = 24
    rng_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_content <= len(CONTENT_NAMES):
            raise ValueError(f"num_content must be in 1..{len(CONTENT_NAMES)}")
        if not 1 <= self.num_style <= len(STYLE_NAMES):
            raise ValueError(f"num_style must be in 1..{len(STYLE_NAMES)}")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be positive")


@dataclass(frozen=True)
class ToyDataset:
    images: torch.Tensor        # [N, 3, S, S] float32 in [-1, 1]
    content_ids: torch.Tensor   # [N] long
    style_ids: torch.Tensor     # [N] long
    spec: ToyDatasetSpec

    def __len__(self):
        return self.images.shape[0]


def _shape_sdf(content_id: int, x, y):
    if content_id == 0:  # circle
        return np.hypot(x, y) - 0.55
    if content_id == 1:  # square
        return np.maximum(np.abs(x), np.abs(y)) - 0.48
    if content_id == 2:  # triangle (apex up)
        return np.maximum.reduce([
            -y - 0.45,
            0.866 * x + 0.5 * y - 0.31,
            -0.866 * x + 0.5 * y - 0.31,
        ])
    if content_id == 3:  # cross
        arm_a = np.maximum(np.abs(x) - 0.58, np.abs(y) - 0.17)
        arm_b = np.maximum(np.abs(x) - 0.17, np.abs(y) - 0.58)
        return np.minimum(arm_a, arm_b)
    if content_id == 4:  # ring
        return np.abs(np.hypot(x, y) - 0.42) - 0.14
    if content_id == 5:  # horizontal bar
        return np.maximum(np.abs(x) - 0.72, np.abs(y) - 0.16)
    raise ValueError(f"unknown content id {content_id}")


def _texture(style_id: int, x, y, phase: float, rng):
    if style_id == 0:  # polka dots
        m = np.sin((x + phase) * math.pi * 4) ** 2 * np.sin((y + phase) * math.pi * 4) ** 2
        return 0.85 + 0.30 * (m > 0.7)
    if style_id == 1:  # diagonal hatching
        return 0.85 + 0.30 * (np.sin((x + y + 2 * phase) * math.pi * 5) > 0)
    if style_id == 2:  # noise grain
        return 1.0 + 0.18 * rng.standard_normal(x.shape)
    if style_id == 3:  # vertical gradient
        return 0.78 + 0.44 * (y + 1) / 2
    if style_id == 4:  # checkerboard
        cells = np.floor((x + 1 + phase) * 4) + np.floor((y + 1 + phase) * 4)
        return 0.85 + 0.30 * (np.mod(cells, 2))
    if style_id == 5:  # horizontal stripes
        return 0.85 + 0.30 * (np.sin((y + 2 * phase) * math.pi * 6) > 0)
    raise ValueError(f"unknown style id {style_id}")


def render_sample(spec: ToyDatasetSpec, content_id: int, style_id: int, index: int):
    """One styled shape image as float32 [3, S, S] in [-1, 1]; pure in its arguments."""
    seq = np.random.SeedSequence([spec.rng_seed, content_id, style_id, index])
    rng = np.random.Generator(np.random.PCG64(seq))
    size = spec.image_size
    centers = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    y, x = np.meshgrid(centers, centers, indexing="ij")

    cx, cy = rng.uniform(-0.12, 0.12, size=2)
    scale = rng.uniform(0.85, 1.1)
    phase = rng.uniform(0.0, 1.0)
    sdf = _shape_sdf(content_id, (x - cx) / scale, (y - cy) / scale) * scale
    alpha = np.clip(0.5 - sdf / 0.06, 0.0, 1.0)

    bg, fg = (np.asarray(c) for c in _PALETTES[style_id])
    tex = _texture(style_id, x, y, phase, rng)
    rgb = (bg[:, None, None] * (1 - alpha) + fg[:, None, None] * alpha) * tex[None]
    rgb = rgb + rng.normal(0.0, 0.01, size=rgb.shape)
    img = np.clip(rgb, 0.0, 1.0) * 2.0 - 1.0
    return torch.from_numpy(img.astype(np.float32))


def generate_dataset(spec: ToyDatasetSpec) -> ToyDataset:
    """Every (content, style) cell exactly spec.samples_per_cell times, in cell order."""
    images, contents, styles = [], [], []
    for c in range(spec.num_content):
        for s in range(spec.num_style):
            for i in range(spec.samples_per_cell):
                images.append(render_sample(spec, c, s, i))
                contents.append(c)
                styles.append(s)
    return ToyDataset(
        images=torch.stack(images),
        content_ids=torch.tensor(contents, dtype=torch.long),
        style_ids=torch.tensor(styles, dtype=torch.long),
        spec=spec,
    )


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 0.03
    momentum: float = 0.9
    cond_dropout: float = 0.1    # drop the whole condition (CFG null)
    style_dropout: float = 0.2   # additionally drop only the style token
    eval_interval: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")
        if not 0.0 <= self.style_dropout < 1.0:
            raise ValueError("style_dropout must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("bad steps/batch_size/lr")


@dataclass
class TrainResult:
    model: torch.nn.Module
    loss_curve: list        # per-step training loss
    eval_curve: list        # (step, eval loss) pairs at eval_interval
    wall_time: float


def _draw_conditions(content_ids, style_ids, config, gen):
    conds = []
    u = torch.rand(len(content_ids), 2, generator=gen)
    for i in range(len(content_ids)):
        if u[i, 0] < config.cond_dropout:
            conds.append(NULL_CONDITION)
        elif u[i, 1] < config.style_dropout:
            conds.append(Condition(content_id=int(content_ids[i])))
        else:
            conds.append(
                Condition(content_id=int(content_ids[i]), style_id=int(style_ids[i]))
            )
    return conds


def _batch_loss(model, images, content_ids, style_ids, config, schedule, gen):
    b = images.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=gen)
    eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
    x_t = add_noise(images, eps, t, schedule)
    conds = _draw_conditions(content_ids, style_ids, config, gen)
    pred = model(x_t, t, conds)
    return torch.mean((pred - eps) ** 2)


def train(model, dataset: ToyDataset, config: TrainConfig, schedule: NoiseSchedule) -> TrainResult:
    """SGD-with-momentum eps-prediction training; deterministic given seeds."""
    import time

    gen = torch.Generator().manual_seed(config.rng_seed)
    eval_gen_seed = config.rng_seed + 1
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    loss_curve, eval_curve = [], []
    n = len(dataset)
    started = time.perf_counter()
    model.train()
    for step in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        loss = _batch_loss(
            model, dataset.images[idx], dataset.content_ids[idx],
            dataset.style_ids[idx], config, schedule, gen,
        )
        if not torch.isfinite(loss):
            tail = [f"{v:.4f}" for v in loss_curve[-8:]]
            raise RuntimeError(
                f"non-finite training loss at step {step} (lr={config.lr}, "
                f"recent losses: {tail})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_curve.append(float(loss.detach()))
        if config.eval_interval and (step + 1) % config.eval_interval == 0:
            with torch.no_grad():
                egen = torch.Generator().manual_seed(eval_gen_seed)
                eidx = torch.randint(0, n, (config.batch_size,), generator=egen)
                eloss = _batch_loss(
                    model, dataset.images[eidx], dataset.content_ids[eidx],
                    dataset.style_ids[eidx], config, schedule, egen,
                )
            eval_curve.append((step + 1, float(eloss)))
    model.eval()
    return TrainResult(
        model=model, loss_curve=loss_curve, eval_curve=eval_curve,
        wall_time=time.perf_counter() - started,
    )


def moving_average(values, window: int):
    """Trailing-window means (mode 'valid'); needs len(values) >= window."""
    if window < 1 or len(values) < window:
        raise ValueError(f"need at least {window} values, got {len(values)}")
    arr = np.asarray(values, dtype=np.float64)
    return np.convolve(arr, np.ones(window) / window, mode="valid")


def grad_check(model, images, t, conds, schedule: NoiseSchedule,
               num_params: int = 64, h: float = 1e-4, seed: int = 0,
               eps_noise: Optional[torch.Tensor] = None) -> float:
    """Max relative error between backprop and central finite differences.

    Runs on a float64 copy of the model so the h^2 truncation error of the
    central difference dominates rounding. The relative error uses an absolute
    floor of 1e-4 to keep near-zero coordinates from dividing by noise.
    """
    probe = copy.deepcopy(model).double()
    probe.train()
    images = images.double()
    if eps_noise is None:
        eps_noise = torch.randn(
            images.shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64
        )

    def loss_fn():
        x_t = add_noise(images, eps_noise, t, schedule)
        pred = probe(x_t, t, conds)
        return torch.mean((pred - eps_noise) ** 2)

    loss = loss_fn()
    probe.zero_grad()
    loss.backward()
    params = [p for p in probe.parameters() if p.grad is not None]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    gen = torch.Generator().manual_seed(seed)
    picks = torch.randperm(len(coords), generator=gen)[:num_params]

    worst = 0.0
    with torch.no_grad():
        for pick in picks.tolist():
            i, j = coords[pick]
            flat = params[i].reshape(-1)
            orig = float(flat[j])
            flat[j] = orig + h
            lo_hi = float(loss_fn())
            flat[j] = orig - h
            lo_lo = float(loss_fn())
            flat[j] = orig
            g_fd = (lo_hi - lo_lo) / (2 * h)
            g_bp = float(params[i].grad.reshape(-1)[j])
            rel = abs(g_fd - g_bp) / max(1e-4, abs(g_fd), abs(g_bp))
            worst = max(worst, rel)
    return worst
