"""Training loop, checkpoints, and evaluation reports.

Training simulates measurements on the fly with the model's current factor
matrices (so learnable factors are optimized end to end), minimizes MSE on
the final stage output with Adam, and follows a two-phase schedule: a main
learning rate for epochs_main epochs, then a fine-tune rate. Batch order is
a pure function of (seed, epoch), which makes resumed runs bit-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ksp
from .data import build_dataset, list_images, load_grayscale, resize_image
from .metrics import psnr, ssim
from .sensing import FactorPair, adjoint, forward
from .solvers import IstaConfig, ista_solve
from .unfolding import (
    HATNet,
    HatnetConfig,
    StageDivergence,
    build_hatnet,
    measurements_for_ratio,
)

ISTA_LAMBDA_SWEEP = (0.002, 0.005, 0.01, 0.02)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    """Data, schedule, and optimizer settings."""

    data_dir: str
    crop: int = 64
    dataset_size: int = 64
    val_images: int = 4
    epochs_main: int = 100
    lr_main: float = 1e-3
    epochs_finetune: int = 20
    lr_finetune: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    sr: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs_main < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.dataset_size < 1:
            raise ValueError("batch_size and dataset_size must be >= 1")
        if self.crop < 8 or self.crop % 4:
            raise ValueError("crop must be >= 8 and divisible by the level grid (4)")
        if not 0 < self.sr <= 1:
            raise ValueError("sampling ratio must be in (0, 1]")

    @property
    def total_epochs(self) -> int:
        return self.epochs_main + self.epochs_finetune

    def lr_for_epoch(self, epoch: int) -> float:
        return self.lr_main if epoch < self.epochs_main else self.lr_finetune


@dataclass
class LogRow:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_psnr: float


@dataclass
class TrainResult:
    last_dir: Path
    best_dir: Path
    log_path: Path
    rows: list[LogRow] = field(default_factory=list)
    best_val_psnr: float = float("-inf")


def mse_loss(x_hat: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels."""
    if x_hat.shape != x_gt.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x_gt.shape)}")
    return ((x_hat - x_gt) ** 2).mean()


def _config_dict(cfg: HatnetConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["window"] = list(d["window"])
    return d


def _config_from_dict(d: dict) -> HatnetConfig:
    d = dict(d)
    d["window"] = tuple(d["window"])
    return HatnetConfig(**d)


def save_checkpoint(directory, model: HATNet, seed: int, training_state: dict | None = None) -> Path:
    """Write the model (and optionally optimizer state) as a KSP tensor dir."""
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    extra = {
        "kind": "hatnet_checkpoint",
        "config": _config_dict(model.cfg),
        "stages": model.cfg.stages,
        "seed": seed,
    }
    if training_state is not None:
        optimizer = training_state.pop("optimizer", None)
        if optimizer is not None:
            names = [n for n, _ in model.named_parameters()]
            opt_state = optimizer.state_dict()["state"]
            step_counts = {}
            for i, name in enumerate(names):
                if i not in opt_state:
                    continue
                entry = opt_state[i]
                tensors[f"optimizer.exp_avg.{name}"] = entry["exp_avg"].cpu().numpy()
                tensors[f"optimizer.exp_avg_sq.{name}"] = entry["exp_avg_sq"].cpu().numpy()
                step_counts[name] = float(entry["step"])
            training_state["optimizer_steps"] = step_counts
        extra["training"] = training_state
    ksp.save_tensor_dir(directory, tensors, extra)
    return Path(directory)


def load_checkpoint(directory) -> tuple[HATNet, dict]:
    """Rebuild the model from a checkpoint; validates shapes against config."""
    tensors, manifest = ksp.load_tensor_dir(directory)
    if manifest.get("kind") != "hatnet_checkpoint":
        raise ValueError(f"{directory} is not a model checkpoint")
    cfg = _config_from_dict(manifest["config"])
    model = build_hatnet(cfg, seed=manifest.get("seed", 0))
    state = {}
    for name, ref in model.state_dict().items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(
                f"tensor {name!r} has shape {arr.shape}, config expects {tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, manifest


def _restore_optimizer(optimizer, model: HATNet, tensors: dict, manifest: dict) -> None:
    steps = manifest.get("training", {}).get("optimizer_steps", {})
    names = [n for n, _ in model.named_parameters()]
    state = {}
    for i, name in enumerate(names):
        ea = tensors.get(f"optimizer.exp_avg.{name}")
        eas = tensors.get(f"optimizer.exp_avg_sq.{name}")
        if ea is None or eas is None:
            continue
        state[i] = {
            "step": torch.tensor(steps.get(name, 0.0)),
            "exp_avg": torch.from_numpy(ea),
            "exp_avg_sq": torch.from_numpy(eas),
        }
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


def _simulate_batch(model: HATNet, x: torch.Tensor) -> torch.Tensor:
    # Measurements with the model's current factors; gradients flow into
    # phi/psi here as well as through the reconstruction path.
    return model.phi @ x @ model.psi.transpose(0, 1)


def _validation_psnr(model: HATNet, val: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        y = _simulate_batch(model, val)
        out, _ = model(y)
    model.train()
    values = [
        psnr(out[i, 0].numpy() * 255.0, val[i, 0].numpy() * 255.0)
        for i in range(val.shape[0])
    ]
    return float(np.mean(values))


def train(
    train_cfg: TrainConfig,
    net_cfg: HatnetConfig,
    out_dir,
    resume_from=None,
) -> TrainResult:
    """Two-phase Adam training; writes last/best checkpoints and a CSV log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(
        train_cfg.data_dir,
        train_cfg.crop,
        train_cfg.dataset_size + train_cfg.val_images,
        train_cfg.seed,
    )
    all_crops = torch.from_numpy(dataset.crops).unsqueeze(1)
    train_crops = all_crops[: train_cfg.dataset_size]
    val_crops = all_crops[train_cfg.dataset_size :]

    start_epoch = 0
    if resume_from is not None:
        model, manifest = load_checkpoint(resume_from)
        tensors, _ = ksp.load_tensor_dir(resume_from)
        optimizer = torch.optim.Adam(
            model.parameters(), lr=train_cfg.lr_main, betas=(train_cfg.beta1, train_cfg.beta2)
        )
        _restore_optimizer(optimizer, model, tensors, manifest)
        start_epoch = int(manifest.get("training", {}).get("epoch", -1)) + 1
    else:
        model = build_hatnet(net_cfg, seed=train_cfg.seed)
        optimizer = torch.optim.Adam(
            model.parameters(), lr=train_cfg.lr_main, betas=(train_cfg.beta1, train_cfg.beta2)
        )

    result = TrainResult(
        last_dir=out_dir / "last", best_dir=out_dir / "best", log_path=out_dir / "train_log.csv"
    )
    model.train()

    def save(directory, epoch):
        save_checkpoint(
            directory,
            model,
            train_cfg.seed,
            training_state={
                "epoch": epoch,
                "optimizer": optimizer,
                "lr": train_cfg.lr_for_epoch(epoch),
                "betas": [train_cfg.beta1, train_cfg.beta2],
            },
        )

    if train_cfg.total_epochs == 0:
        save(result.last_dir, -1)
        save(result.best_dir, -1)

    for epoch in range(start_epoch, train_cfg.total_epochs):
        lr = train_cfg.lr_for_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_crops))
        losses = []
        for step in range(0, len(order), train_cfg.batch_size):
            batch = train_crops[order[step : step + train_cfg.batch_size]]
            try:
                y = _simulate_batch(model, batch)
                out, _ = model(y)
                loss = mse_loss(out, batch)
            except StageDivergence as err:
                raise TrainingDiverged(epoch, step // train_cfg.batch_size) from err
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, step // train_cfg.batch_size)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        val_psnr = _validation_psnr(model, val_crops) if len(val_crops) else float("nan")
        phase = "main" if epoch < train_cfg.epochs_main else "finetune"
        result.rows.append(LogRow(epoch, phase, lr, float(np.mean(losses)), val_psnr))
        save(result.last_dir, epoch)
        if val_psnr > result.best_val_psnr or np.isnan(val_psnr):
            result.best_val_psnr = val_psnr
            save(result.best_dir, epoch)

    with open(result.log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "phase", "lr", "train_loss", "val_psnr"])
        for row in result.rows:
            writer.writerow([row.epoch, row.phase, row.lr, row.train_loss, row.val_psnr])
    return result


@dataclass
class MethodResult:
    method: str
    psnr_values: list[float]
    ssim_values: list[float]
    seconds: float
    stage_mean_psnr: list[float] | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))


@dataclass
class EvalReport:
    sr: float
    image_names: list[str]
    methods: list[MethodResult]

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.method == name:
                return m
        raise KeyError(name)

    def to_json(self, path) -> None:
        payload = {
            "sr": self.sr,
            "images": self.image_names,
            "methods": [
                {
                    "method": m.method,
                    "psnr": m.psnr_values,
                    "ssim": m.ssim_values,
                    "mean_psnr": m.mean_psnr,
                    "mean_ssim": m.mean_ssim,
                    "seconds": m.seconds,
                    "stage_mean_psnr": m.stage_mean_psnr,
                }
                for m in self.methods
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "image", "psnr", "ssim"])
            for m in self.methods:
                for name, p, s in zip(self.image_names, m.psnr_values, m.ssim_values):
                    writer.writerow([m.method, name, p, s])
                writer.writerow([m.method, "mean", m.mean_psnr, m.mean_ssim])


def _metric_pair(x: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    return psnr(x * 255.0, ref * 255.0), ssim(x * 255.0, ref * 255.0)


def _safe_ista_rho(pair: FactorPair) -> float:
    # sigma_max(kron(psi, phi)) = sigma_max(phi) * sigma_max(psi).
    s_phi = np.linalg.svd(np.asarray(pair.phi), compute_uv=False)[0]
    s_psi = np.linalg.svd(np.asarray(pair.psi), compute_uv=False)[0]
    return 1.0 / float((s_phi * s_psi) ** 2)


def evaluate(
    checkpoint_dir,
    test_dir,
    sr: float | None = None,
    include_ista: bool = False,
    ista_max_iters: int = 100,
) -> EvalReport:
    """Full-image evaluation of a checkpoint against a test directory.

    Always reports the adjoint back-projection as a reference row; the
    ISTA-TV row (optional) sweeps a small lambda grid and keeps the best
    mean-PSNR setting.
    """
    model, _ = load_checkpoint(checkpoint_dir)
    cfg = model.cfg
    if sr is not None:
        expected = (
            measurements_for_ratio(cfg.n_r, sr),
            measurements_for_ratio(cfg.n_c, sr),
        )
        if expected != (cfg.m_r, cfg.m_c):
            raise ValueError(
                f"checkpoint measures {cfg.m_r}x{cfg.m_c}, sr={sr} implies {expected}"
            )
    paths = list_images(test_dir)
    if not paths:
        raise ValueError(f"no test images in {test_dir}")
    images = []
    for p in paths:
        arr = load_grayscale(p)
        if arr.shape != (cfg.n_r, cfg.n_c):
            arr = resize_image(arr, (cfg.n_r, cfg.n_c))
        images.append(arr)
    pair = model.factor_pair()
    measurements = [forward(pair, x) for x in images]

    methods = []

    t0 = time.perf_counter()
    adj_metrics = [_metric_pair(adjoint(pair, y), x) for y, x in zip(measurements, images)]
    methods.append(
        MethodResult(
            "adjoint",
            [m[0] for m in adj_metrics],
            [m[1] for m in adj_metrics],
            time.perf_counter() - t0,
        )
    )

    t0 = time.perf_counter()
    model.eval()
    hat_psnr, hat_ssim = [], []
    stage_psnr = np.zeros(cfg.stages)
    with torch.no_grad():
        for y, x in zip(measurements, images):
            yt = torch.from_numpy(y.astype(np.float32))[None, None]
            out, stages = model(yt)
            rec = out[0, 0].numpy().astype(np.float64)
            p, s = _metric_pair(rec, x)
            hat_psnr.append(p)
            hat_ssim.append(s)
            for k, xs in enumerate(stages):
                stage_psnr[k] += psnr(xs[0, 0].numpy() * 255.0, x * 255.0)
    methods.append(
        MethodResult(
            "hatnet",
            hat_psnr,
            hat_ssim,
            time.perf_counter() - t0,
            stage_mean_psnr=(stage_psnr / len(images)).tolist(),
        )
    )

    if include_ista:
        t0 = time.perf_counter()
        rho = _safe_ista_rho(pair)
        best = None
        for lam in ISTA_LAMBDA_SWEEP:
            cfg_ista = IstaConfig(rho=rho, lam=lam, max_iters=ista_max_iters, prox="tv")
            metrics = [
                _metric_pair(ista_solve(y, pair, cfg_ista)[0], x)
                for y, x in zip(measurements, images)
            ]
            mean_p = float(np.mean([m[0] for m in metrics]))
            if best is None or mean_p > best[0]:
                best = (mean_p, lam, metrics)
        _, _, metrics = best
        methods.append(
            MethodResult(
                "ista_tv",
                [m[0] for m in metrics],
                [m[1] for m in metrics],
                time.perf_counter() - t0,
            )
        )

    return EvalReport(
        sr=cfg.sampling_ratio, image_names=[p.name for p in paths], methods=methods
    )
