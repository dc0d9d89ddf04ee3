"""Command-line surface for the full pipeline.

Subcommands: train, generate, restyle (the headline operation), sweep,
attnmap, report, replay. Every command resolves its flags (an optional
key=value config file may preset them; explicit flags win), writes its
outputs as plain files (PNG/CSV/JSON/checkpoints), and drops a RunManifest
JSON next to them so any run can be replayed bitwise on the same build.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import analysis, checkpoint, defaults
from .manifest import RunManifest, git_describe, load_manifest, manifest_path_for
from .scheduler import SamplerConfig, sample
from .swap import CapturedFeatures, ReferenceSource, SwapPolicy, run_reference, run_styled
from .toytrain import TrainConfig, generate_dataset, train
from .unet import Condition, build_model

# flags (by dest name) that name output files/dirs, per command — used by replay
OUTPUT_FLAGS = {
    "train": ("out",),
    "generate": ("out",),
    "restyle": ("out", "save_features"),
    "sweep": ("out_dir",),
    "attnmap": ("out",),
    "report": ("out",),
}


def save_image_png(path, image: torch.Tensor) -> None:
    """[-1, 1] float image -> 8-bit RGB PNG by affine map and clamp."""
    from PIL import Image

    arr = image.detach().to(torch.float64).clamp(-1.0, 1.0).cpu().numpy()
    u8 = np.round((arr + 1.0) / 2.0 * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, "RGB").save(str(path), format="PNG")


def load_image_png(path) -> torch.Tensor:
    """8-bit RGB PNG -> float32 [3, H, W] in [-1, 1]."""
    from PIL import Image

    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 255.0 * 2.0 - 1.0)


def _load_model(path):
    model, meta = checkpoint.load_model(path)
    for p in model.parameters():
        p.requires_grad_(False)
    return model, meta


def _new_manifest(args: argparse.Namespace) -> RunManifest:
    payload = {k: v for k, v in vars(args).items() if k != "command"}
    return RunManifest(command=args.command, args=payload, git=git_describe())


def _sampler_config(args, **overrides) -> SamplerConfig:
    base = dict(
        num_inference_steps=getattr(args, "steps", 50),
        guidance_scale=getattr(args, "w", 7.0),
        eta=getattr(args, "eta", 0.0),
        rng_seed=getattr(args, "seed", 0),
    )
    base.update(overrides)
    return SamplerConfig(**base)


# ---------------------------------------------------------------------------
# handlers


def cmd_train(args) -> int:
    started = time.perf_counter()
    manifest = _new_manifest(args)
    dataset = generate_dataset(replace(defaults.DEFAULT_DATASET, rng_seed=args.data_seed))
    model = build_model(replace(defaults.DEFAULT_MODEL_SPEC, param_seed=args.seed))
    config = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr,
                         rng_seed=args.seed)
    schedule = defaults.default_schedule()
    result = train(model, dataset, config, schedule)
    tail = result.loss_curve[-200:] if result.loss_curve else [float("nan")]
    checkpoint.save_model(args.out, model, extra_meta={
        "train_config": asdict(config),
        "dataset_spec": asdict(dataset.spec),
        "final_loss_ma": float(np.mean(tail)),
    })
    manifest.seeds = {"train": args.seed, "data": args.data_seed}
    manifest.add_output(args.out)
    manifest.wall_time = time.perf_counter() - started
    manifest.write(manifest_path_for(args.out))
    print(f"trained {args.steps} steps in {result.wall_time:.1f}s, "
          f"final 200-step mean loss {float(np.mean(tail)):.4f} -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    started = time.perf_counter()
    manifest = _new_manifest(args)
    model, _ = _load_model(args.model)
    schedule = defaults.default_schedule()
    config = _sampler_config(args)
    cond = Condition(content_id=args.content, style_id=args.style)
    result = sample(model, cond, config, schedule)
    save_image_png(args.out, result.image)
    manifest.seeds = {"sample": args.seed}
    manifest.add_checkpoint("model", args.model)
    manifest.add_output(args.out)
    manifest.wall_time = time.perf_counter() - started
    manifest.write(manifest_path_for(args.out))
    print(f"wrote {args.out}")
    return 0


def _build_policy(args) -> SwapPolicy:
    if args.policy in ("swap_kv", "shared_adain"):
        s = args.start_ordinal
        return SwapPolicy(mode=args.policy,
                          start_ordinal=defaults.PINNED_START_ORDINAL if s is None else s)
    return SwapPolicy(mode=args.policy)


def _reference_for(args, model):
    """ReferenceSource plus the capture-q flag implied by the policy."""
    if args.ref_image:
        ref_cond = None
        if args.ref_content is not None:
            ref_cond = Condition(content_id=args.ref_content, style_id=args.ref_style)
        return ReferenceSource(image=load_image_png(args.ref_image), method=args.invert,
                               t_start=args.t_start, cond=ref_cond)
    if args.ref_style is None:
        raise ValueError("need --ref-style (synthetic reference) or --ref-image")
    ref_content = args.ref_content
    if ref_content is None:
        ref_content = (args.content + 1) % model.spec.num_content_classes
    return ReferenceSource(cond=Condition(content_id=ref_content, style_id=args.ref_style))


def _run_restyle(args, model, schedule, record_attention=False):
    policy = _build_policy(args)
    config = _sampler_config(args)
    captured = None
    ref_seed = args.ref_seed if args.ref_seed is not None else args.seed + 1000
    if policy.mode != "none":
        if args.features:
            captured = CapturedFeatures.load(args.features)
        else:
            source = _reference_for(args, model)
            ref_config = _sampler_config(args, rng_seed=ref_seed)
            _, captured = run_reference(model, source, ref_config, schedule,
                                        capture_q=(policy.mode == "shared_adain"))
    cond = Condition(content_id=args.content, style_id=args.style)
    styled = run_styled(model, cond, captured, policy, config, schedule,
                        record_attention=record_attention)
    return styled, captured, policy, ref_seed


def cmd_restyle(args) -> int:
    started = time.perf_counter()
    manifest = _new_manifest(args)
    model, _ = _load_model(args.model)
    schedule = defaults.default_schedule()
    styled, captured, policy, ref_seed = _run_restyle(args, model, schedule)
    save_image_png(args.out, styled.image)
    if args.save_features:
        if captured is None:
            raise ValueError("--save-features needs a reference run (policy is none)")
        captured.save(args.save_features)
        manifest.add_output(args.save_features)
    manifest.seeds = {"sample": args.seed, "reference": ref_seed}
    manifest.add_checkpoint("model", args.model)
    manifest.add_output(args.out)
    manifest.wall_time = time.perf_counter() - started
    manifest.write(manifest_path_for(args.out))
    print(f"wrote {args.out} (policy {policy.mode})")
    return 0


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    manifest = _new_manifest(args)
    model, _ = _load_model(args.model)
    schedule = defaults.default_schedule()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = analysis.make_eval_grid(base_seed=args.grid_seeds)
    gate_data = generate_dataset(defaults.GATE_DATASET)
    config = _sampler_config(args, rng_seed=0)
    result = analysis.sweep_start_layer(
        model, grid, config, schedule, gate_data,
        knee_frac=args.knee_frac, leakage_ceiling=args.leakage_ceiling,
    )
    csv_path = out_dir / "sweep.csv"
    png_path = out_dir / "sweep.png"
    report_path = out_dir / "report.json"
    analysis.write_sweep_csv(result, csv_path)
    analysis.plot_sweep(result, png_path)
    report = analysis.report_header({
        "selected_s": result.selected_s,
        "knee_frac": result.knee_frac,
        "leakage_ceiling": result.leakage_ceiling,
        "grid_hash": result.grid_hash,
        "gate": asdict(result.gate),
        "locality_tensors_compared": result.locality_checks,
        "rows": [{"s": s, "style_similarity_se": rep.style_similarity_se,
                  **{k: v for k, v in asdict(rep).items()
                     if k != "style_similarity_values"}}
                 for s, rep in result.rows],
    })
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest.seeds = {"grid_base": args.grid_seeds}
    manifest.add_checkpoint("model", args.model)
    for p in (csv_path, png_path, report_path):
        manifest.add_output(p)
    manifest.wall_time = time.perf_counter() - started
    manifest.write(out_dir / "manifest.json")
    print(f"sweep selected start ordinal s={result.selected_s} -> {csv_path}")
    return 0


def _parse_query(text: str):
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"--query expects 'x,y', got {text!r}")
    return int(parts[0]), int(parts[1])


def cmd_attnmap(args) -> int:
    started = time.perf_counter()
    manifest = _new_manifest(args)
    model, _ = _load_model(args.model)
    schedule = defaults.default_schedule()
    if args.policy in ("swap_kv", "shared_adain") and args.start_ordinal is None:
        # make sure the requested layer is inside the swapped range
        args.start_ordinal = min(defaults.PINNED_START_ORDINAL, args.layer)
    styled, _, policy, ref_seed = _run_restyle(args, model, schedule, record_attention=True)
    amap = analysis.attention_map(styled, args.layer, args.step,
                                  num_heads=model.spec.num_heads)
    n_q, n_k = amap.map.shape
    res_q, res_k = int(round(n_q ** 0.5)), int(round(n_k ** 0.5))
    if args.query is not None:
        qx, qy = _parse_query(args.query)
        if not (0 <= qx < res_q and 0 <= qy < res_q):
            raise ValueError(f"query point {qx},{qy} outside the {res_q}x{res_q} grid")
        mask = torch.zeros(n_q, dtype=torch.bool)
        mask[qy * res_q + qx] = True
        row = analysis.region_averaged_map(amap, mask)
        png = analysis.render_heatmap(row.reshape(res_k, res_k), scale=args.scale)
    elif args.mask is not None:
        mask_img = load_image_png(args.mask)
        mask = mask_img.mean(dim=0) > 0.0  # nonzero (above mid-gray) pixels select queries
        if mask.shape != (res_q, res_q):
            raise ValueError(
                f"mask is {tuple(mask.shape)} but the layer's query grid is {res_q}x{res_q}"
            )
        row = analysis.region_averaged_map(amap, mask)
        png = analysis.render_heatmap(row.reshape(res_k, res_k), scale=args.scale)
    else:
        png = analysis.render_heatmap(amap.map, scale=1)
    Path(args.out).write_bytes(png)
    manifest.seeds = {"sample": args.seed, "reference": ref_seed}
    manifest.add_checkpoint("model", args.model)
    manifest.add_output(args.out)
    manifest.wall_time = time.perf_counter() - started
    manifest.write(manifest_path_for(args.out))
    print(f"wrote {args.out} (layer {args.layer}, step {args.step}, policy {policy.mode})")
    return 0


def cmd_report(args) -> int:
    started = time.perf_counter()
    manifest = _new_manifest(args)
    image_paths = sorted(Path(args.images).glob("*.png"))
    if not image_paths:
        raise ValueError(f"no PNG images under {args.images}")
    images = [load_image_png(p) for p in image_paths]
    if args.refs:
        ref_paths = sorted(Path(args.refs).glob("*.png"))
    else:
        ref_paths = [Path(args.ref)] if args.ref else []
    refs = [load_image_png(p) for p in ref_paths]

    metrics = {"n_images": len(images), "diversity": analysis.diversity(images)}
    if refs:
        sims = [float(np.mean([analysis.style_similarity(img, r) for r in refs]))
                for img in images]
        metrics["style_similarity"] = float(np.mean(sims))
    if args.content is not None:
        metrics["content_alignment"] = float(np.mean(
            [analysis.content_alignment(img, args.content) for img in images]
        ))
    if args.content is not None and args.ref_content is not None:
        metrics["leakage"] = float(np.mean(
            [analysis.leakage(img, args.ref_content, args.content) for img in images]
        ))
    report = analysis.report_header({
        "metrics": metrics,
        "images": [str(p) for p in image_paths],
        "references": [str(p) for p in ref_paths],
    })
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest.add_output(args.out)
    manifest.wall_time = time.perf_counter() - started
    manifest.write(manifest_path_for(args.out))
    print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    manifest = load_manifest(args.manifest)
    if manifest.command not in OUTPUT_FLAGS:
        raise ValueError(f"cannot replay command {manifest.command!r}")
    new_args = dict(manifest.args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for flag in OUTPUT_FLAGS[manifest.command]:
        if new_args.get(flag):
            new_args[flag] = str(out_dir / Path(new_args[flag]).name)
    ns = argparse.Namespace(command=manifest.command, **new_args)
    code = HANDLERS[manifest.command](ns)
    print(f"replayed {manifest.command} into {out_dir}")
    return code


HANDLERS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "restyle": cmd_restyle,
    "sweep": cmd_sweep,
    "attnmap": cmd_attnmap,
    "report": cmd_report,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# parser


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="styleswap",
        description="Training-free style transfer in a toy diffusion model by "
                    "swapping self-attention key/value features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None,
                       help="key=value file presetting flags (explicit flags win)")
        subparsers[name] = p
        return p

    p = add("train", "train the toy diffusion model")
    p.add_argument("--steps", type=int, default=defaults.DEFAULT_TRAIN.steps)
    p.add_argument("--batch", type=int, default=defaults.DEFAULT_TRAIN.batch_size)
    p.add_argument("--lr", type=float, default=defaults.DEFAULT_TRAIN.lr)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", default="model.ckpt")

    def sampling_flags(p, with_style=True):
        p.add_argument("--model", default=str(defaults.MODEL_ASSET))
        p.add_argument("--content", type=int, required=True,
                       help="content category id of the generated image")
        if with_style:
            p.add_argument("--style", type=int, default=None,
                           help="optional style category id for the prompt")
        p.add_argument("--w", type=float, default=7.0, help="guidance scale")
        p.add_argument("--steps", type=int, default=50, help="inference steps")
        p.add_argument("--eta", type=float, default=0.0)
        p.add_argument("--seed", type=int, default=0)

    p = add("generate", "vanilla sampling")
    sampling_flags(p)
    p.add_argument("--out", default="img.png")

    def restyle_flags(p):
        sampling_flags(p)
        p.add_argument("--ref-style", type=int, default=None,
                       help="style id of a synthetic reference")
        p.add_argument("--ref-content", type=int, default=None,
                       help="content id of the reference (default: next category)")
        p.add_argument("--ref-seed", type=int, default=None,
                       help="reference process seed (default: seed + 1000)")
        p.add_argument("--ref-image", default=None,
                       help="PNG to invert instead of a synthetic reference")
        p.add_argument("--invert", choices=("stochastic", "ddim"), default="stochastic")
        p.add_argument("--t-start", type=int, default=None,
                       help="stochastic inversion depth (default 0.6*T, snapped)")
        p.add_argument("--policy", default="swap_kv",
                       choices=("swap_kv", "shared_adain", "swap_all", "swap_no_mid", "none"))
        p.add_argument("--start-ordinal", type=int, default=None,
                       help=f"first swapped up-layer ordinal "
                            f"(default: pinned sweep result {defaults.PINNED_START_ORDINAL})")
        p.add_argument("--features", default=None,
                       help="reuse captured reference features from this checkpoint")

    p = add("restyle", "style an original prompt with a reference's attention features")
    restyle_flags(p)
    p.add_argument("--save-features", default=None,
                   help="persist captured reference features to this checkpoint")
    p.add_argument("--out", default="styled.png")

    p = add("sweep", "evaluate every swap start layer and select the knee")
    p.add_argument("--model", default=str(defaults.MODEL_ASSET))
    p.add_argument("--grid-seeds", type=int, default=defaults.EVAL_GRID_BASE_SEED,
                   help="base seed of the pinned evaluation grid")
    p.add_argument("--w", type=float, default=7.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--knee-frac", type=float, default=defaults.KNEE_FRAC)
    p.add_argument("--leakage-ceiling", type=float, default=defaults.LEAKAGE_CEILING)
    p.add_argument("--out-dir", default="sweep_out")

    p = add("attnmap", "emit an attention heatmap from a styled run")
    restyle_flags(p)
    p.add_argument("--layer", type=int, required=True, help="self-attention layer ordinal")
    p.add_argument("--step", type=int, default=analysis.DEFAULT_MAP_STEP,
                   help="denoising step index of the map")
    p.add_argument("--query", default=None, help="single query point 'x,y'")
    p.add_argument("--mask", default=None, help="PNG query mask (bright pixels select)")
    p.add_argument("--scale", type=int, default=8, help="upscale factor for the heatmap")
    p.add_argument("--out", default="attnmap.png")

    p = add("report", "metric report over a directory of generated images")
    p.add_argument("--images", required=True, help="directory of PNGs to score")
    p.add_argument("--ref", default=None, help="single reference PNG")
    p.add_argument("--refs", default=None, help="directory of reference PNGs")
    p.add_argument("--content", type=int, default=None,
                   help="expected content id of the images")
    p.add_argument("--ref-content", type=int, default=None,
                   help="reference content id (enables leakage)")
    p.add_argument("--out", default="report.json")

    p = add("replay", "re-run a manifest, writing outputs into a new directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default="replay_out")

    return parser, subparsers


def _apply_config_file(argv, parser, subparsers):
    """Read an optional key=value preset file and install it as defaults."""
    if not argv:
        return
    name = argv[0]
    if name not in subparsers or "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    presets = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        presets[key.strip().replace("-", "_")] = value.strip()
    sub = subparsers[name]
    known = {a.dest: a for a in sub._actions}
    unknown = sorted(set(presets) - set(known))
    if unknown:
        raise ValueError(f"{path}: unknown config keys {unknown}")
    typed = {}
    for key, raw in presets.items():
        action = known[key]
        if action.type is not None:
            typed[key] = action.type(raw)
        elif isinstance(action.default, bool):
            typed[key] = raw.lower() in ("1", "true", "yes")
        else:
            typed[key] = raw
    sub.set_defaults(**typed)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("STYLESWAP_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser, subparsers = build_parser()
    try:
        _apply_config_file(argv, parser, subparsers)
        args = parser.parse_args(argv)
        return HANDLERS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all failures
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
