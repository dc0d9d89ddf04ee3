"""Train the grayscale content classifier and commit it as a package asset.

Run once from the repo root:

    python3 scripts/train_content_oracle.py

The classifier must (a) hit >= 95% top-1 on raw procedural images of a
held-out seed and (b) stay calibrated on garbage: uniform-noise inputs get a
near-uniform distribution (max prob <= 0.5). Augmentation covers the inputs
the oracle will actually score: noisy, brightness/contrast-shifted samples
from the diffusion model, not just clean renders.
"""

import argparse
from pathlib import Path

import torch
import torch.nn.functional as F

from styleswap.analysis import ContentOracleNet, oracle_asset_path
from styleswap.checkpoint import save_tensors
from styleswap.toytrain import ToyDatasetSpec, generate_dataset


def augment(images, gen):
    noise_std = torch.rand(images.shape[0], 1, 1, 1, generator=gen) * 0.35
    out = images + noise_std * torch.randn(images.shape, generator=gen)
    gain = 0.75 + 0.5 * torch.rand(images.shape[0], 1, 1, 1, generator=gen)
    shift = 0.4 * torch.rand(images.shape[0], 1, 1, 1, generator=gen) - 0.2
    return (out * gain + shift).clamp(-1.0, 1.0)


def to_gray(images):
    return images.mean(dim=1, keepdim=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    gen = torch.Generator().manual_seed(args.seed)
    train_data = generate_dataset(ToyDatasetSpec(samples_per_cell=40, rng_seed=1))
    val_data = generate_dataset(ToyDatasetSpec(samples_per_cell=10, rng_seed=2))

    net = ContentOracleNet(num_classes=6)
    opt = torch.optim.Adam(net.parameters(), lr=args.lr)
    n = len(train_data)
    uniform = torch.full((1, 6), 1.0 / 6)

    for step in range(args.steps):
        idx = torch.randint(0, n, (args.batch,), generator=gen)
        x = augment(train_data.images[idx], gen)
        logits = net(to_gray(x))
        loss = F.cross_entropy(logits, train_data.content_ids[idx])
        # keep the classifier agnostic on pure noise
        junk = torch.rand(args.batch // 4, 3, 32, 32, generator=gen) * 2 - 1
        junk_logp = F.log_softmax(net(to_gray(junk)), dim=-1)
        loss = loss + 0.5 * F.kl_div(junk_logp, uniform.expand_as(junk_logp),
                                     reduction="batchmean")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % 500 == 0:
            print(f"step {step + 1}: loss {float(loss.detach()):.4f}")

    net.eval()
    with torch.no_grad():
        val_logits = net(to_gray(val_data.images))
        acc = float((val_logits.argmax(1) == val_data.content_ids).float().mean())
        noise = torch.rand(256, 3, 32, 32, generator=gen) * 2 - 1
        noise_max = float(torch.softmax(net(to_gray(noise)), dim=-1).max(dim=1).values.mean())
    print(f"val top-1 {acc:.4f}; mean max-prob on noise {noise_max:.4f}")
    if acc < 0.95:
        raise SystemExit(f"validation accuracy {acc:.4f} below the 0.95 gate; not saving")

    out = Path(args.out) if args.out else oracle_asset_path()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensors(out, dict(net.state_dict()), meta={
        "num_classes": 6,
        "val_accuracy": acc,
        "noise_mean_max_prob": noise_max,
        "train_steps": args.steps,
        "train_seed": args.seed,
    })
    print(f"saved {out}")


if __name__ == "__main__":
    main()
