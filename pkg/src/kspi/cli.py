"""Command-line surface.

Subcommands: matrices, simulate, reconstruct, train, eval, bench, ablate.
Every artifact written by one subcommand is readable by the ones that
consume it; all stochastic outputs are pinned by --seed or the config seed.
Failures exit nonzero with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ksp
from .data import load_grayscale, resize_image
from .sensing import FactorPair, add_noise, build_factor_pair, forward
from .solvers import IstaConfig, ista_solve
from .training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .unfolding import HatnetConfig, measurements_for_ratio, reconstruct

MATRICES_META = "matrices.json"


def save_matrices(directory, pair: FactorPair) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ksp.write_ksp(directory / "phi.ksp", np.asarray(pair.phi))
    ksp.write_ksp(directory / "psi.ksp", np.asarray(pair.psi))
    meta = {
        "scheme": pair.scheme,
        "n_r": pair.phi.shape[1],
        "n_c": pair.psi.shape[1],
        "m_r": pair.phi.shape[0],
        "m_c": pair.psi.shape[0],
        "sampling_ratio": pair.sampling_ratio,
    }
    with open(directory / MATRICES_META, "w") as fh:
        json.dump(meta, fh, indent=2)


def load_matrices(directory) -> FactorPair:
    directory = Path(directory)
    meta_path = directory / MATRICES_META
    if not meta_path.is_file():
        raise FileNotFoundError(f"no {MATRICES_META} in {directory}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    phi = ksp.read_ksp(directory / "phi.ksp").astype(np.float64)
    psi = ksp.read_ksp(directory / "psi.ksp").astype(np.float64)
    return FactorPair(phi=phi, psi=psi, scheme=meta["scheme"])


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    data = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((data * 255.0).round().astype(np.uint8), mode="L").save(path)


def load_run_config(path) -> tuple[TrainConfig, HatnetConfig]:
    """Parse the flat JSON schema driving train/eval/ablate.

    Required: data_dir. Optional keys with defaults: crop 64, dataset_size
    64, val_images 4, epochs_main 100, lr_main 1e-3, epochs_finetune 20,
    lr_finetune 1e-4, beta1 0.9, beta2 0.999, batch_size 8, sr 0.25, seed 0,
    scheme "learnable", stages 5, channels 32, window [4, 16], pool 2,
    head_dim 16, csa_beta 16, ffn_expansion 2, use_cssc/use_hf/use_lf/use_csa
    true. The training crop is the reconstruction grid.
    """
    with open(path) as fh:
        raw = json.load(fh)
    if "data_dir" not in raw:
        raise ValueError("config must set data_dir")
    train_keys = {
        "data_dir",
        "crop",
        "dataset_size",
        "val_images",
        "epochs_main",
        "lr_main",
        "epochs_finetune",
        "lr_finetune",
        "beta1",
        "beta2",
        "batch_size",
        "sr",
        "seed",
    }
    net_keys = {
        "scheme",
        "stages",
        "channels",
        "window",
        "pool",
        "head_dim",
        "csa_beta",
        "ffn_expansion",
        "use_cssc",
        "use_hf",
        "use_lf",
        "use_csa",
    }
    unknown = set(raw) - train_keys - net_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    train_cfg = TrainConfig(**{k: raw[k] for k in train_keys if k in raw})
    net_kwargs = {k: raw[k] for k in net_keys if k in raw}
    if "window" in net_kwargs:
        net_kwargs["window"] = tuple(net_kwargs["window"])
    n = train_cfg.crop
    m = measurements_for_ratio(n, train_cfg.sr)
    net_cfg = HatnetConfig(n_r=n, n_c=n, m_r=m, m_c=m, **net_kwargs)
    return train_cfg, net_cfg


def cmd_matrices(args) -> int:
    m = measurements_for_ratio(args.n, args.sr)
    pair = build_factor_pair(args.n, args.n, m, m, scheme=args.scheme, seed=args.seed)
    save_matrices(args.out, pair)
    print(f"wrote {args.out}: phi {pair.phi.shape}, psi {pair.psi.shape}, "
          f"alpha={pair.sampling_ratio:.4f}")
    return 0


def cmd_simulate(args) -> int:
    pair = load_matrices(args.matrices)
    image = load_grayscale(args.image)
    if image.shape != pair.image_shape:
        image = resize_image(image, pair.image_shape)
    y = forward(pair, image)
    y = add_noise(y, args.noise_sigma, seed=args.seed)
    ksp.write_ksp(args.out, y)
    print(f"wrote {args.out}: measurement {y.shape}")
    return 0


def cmd_reconstruct(args) -> int:
    pair = load_matrices(args.matrices)
    y = ksp.read_ksp(args.measurement).astype(np.float64)
    if args.method == "ista-tv":
        cfg = IstaConfig(
            rho=args.rho, lam=args.lam, max_iters=args.iters, tol=args.tol, prox="tv"
        )
        x, trace = ista_solve(y, pair, cfg)
        if args.trace:
            trace.to_csv(args.trace)
    else:
        if not args.checkpoint:
            raise ValueError("--checkpoint is required for method hatnet")
        model, _ = load_checkpoint(args.checkpoint)
        model_pair = model.factor_pair()
        if model_pair.phi.shape != pair.phi.shape or not (
            np.allclose(model_pair.phi, pair.phi, atol=1e-5)
            and np.allclose(model_pair.psi, pair.psi, atol=1e-5)
        ):
            raise ValueError(
                "matrices directory does not match the checkpoint factors; "
                "simulate with the checkpoint's matrices"
            )
        x = reconstruct(model, y)
    out = Path(args.out)
    write_png(out, x)
    ksp.write_ksp(out.with_suffix(".ksp"), x)
    print(f"wrote {out} and {out.with_suffix('.ksp')}")
    return 0


def cmd_train(args) -> int:
    train_cfg, net_cfg = load_run_config(args.config)
    result = train(train_cfg, net_cfg, args.out)
    model, _ = load_checkpoint(result.last_dir)
    save_matrices(Path(args.out) / "matrices", model.factor_pair())
    best = result.best_val_psnr
    print(f"trained {train_cfg.total_epochs} epochs; best val PSNR {best:.2f} dB; "
          f"checkpoints in {args.out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(
        args.checkpoint, args.test_dir, sr=args.sr, include_ista=args.include_ista
    )
    report_path = Path(args.report)
    report.to_json(report_path)
    report.to_csv(report_path.with_suffix(".csv"))
    for m in report.methods:
        print(f"{m.method}: mean PSNR {m.mean_psnr:.2f} dB, mean SSIM {m.mean_ssim:.4f}")
    print(f"wrote {report_path} and {report_path.with_suffix('.csv')}")
    return 0


def cmd_bench(args) -> int:
    from .bench import time_gradient_step

    report = time_gradient_step(args.n, args.sr, reps=args.reps, seed=args.seed)
    report.to_json(args.report)
    print(report.render_table())
    print(f"wrote {args.report}")
    return 0


def cmd_ablate(args) -> int:
    train_cfg, net_cfg = load_run_config(args.config)
    toggle_map = {"cssc": "use_cssc", "hf": "use_hf", "lf": "use_lf", "csa": "use_csa"}
    field = toggle_map[args.toggle]
    if not getattr(net_cfg, field):
        raise ValueError(f"config already disables {args.toggle}")
    net_cfg = HatnetConfig(**{**net_cfg.__dict__, field: False})
    result = train(train_cfg, net_cfg, args.out)
    print(f"ablation '{args.toggle}' trained; best val PSNR {result.best_val_psnr:.2f} dB; "
          f"checkpoints in {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kspi",
        description="Kronecker single-pixel imaging: simulate, reconstruct, train, bench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("matrices", help="build and persist a factor pair")
    p.add_argument("--n", type=int, required=True, help="scene side length (power of two)")
    p.add_argument("--sr", type=float, required=True, help="sampling ratio in (0, 1]")
    p.add_argument("--scheme", choices=["hadamard_cc", "learnable"], default="hadamard_cc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_matrices)

    p = sub.add_parser("simulate", help="measure an image through a factor pair")
    p.add_argument("--image", required=True)
    p.add_argument("--matrices", required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0, dest="noise_sigma")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="measurement .ksp path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct an image from a measurement")
    p.add_argument("--method", choices=["ista-tv", "hatnet"], required=True)
    p.add_argument("--measurement", required=True)
    p.add_argument("--matrices", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True, help="output PNG path (KSP written alongside)")
    p.add_argument("--trace", default=None, help="optional CSV solve trace (ista-tv)")
    p.add_argument("--lambda", type=float, default=0.0, dest="lam",
                   help="TV weight (0 disables regularization)")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train a reconstruction network")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-dir", required=True, dest="test_dir")
    p.add_argument("--sr", type=float, default=None)
    p.add_argument("--report", required=True, help="JSON report path (CSV alongside)")
    p.add_argument("--include-ista", action="store_true", dest="include_ista")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the factored vs vectorized gradient step")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sr", type=float, required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train with one component disabled")
    p.add_argument("--config", required=True)
    p.add_argument("--toggle", choices=["cssc", "hf", "lf", "csa"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
