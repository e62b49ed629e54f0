"""Unfolded tensor-ISTA network.

K stages alternate a tensor gradient-descent step with learnable per-stage
step sizes and a stage-specific U-shaped denoiser; decoder features flow
between consecutive stages. The factor matrices ride along as fixed buffers
or trainable parameters depending on the scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .denoiser import DenoiserConfig, StageDenoiser
from .sensing import FactorPair, build_factor_pair


class StageDivergence(RuntimeError):
    """Raised when a stage output leaves the finite range."""

    def __init__(self, stage: int):
        super().__init__(f"non-finite values after stage {stage}")
        self.stage = stage


@dataclass
class HatnetConfig:
    """Network-level knobs: problem geometry plus per-stage denoiser config."""

    n_r: int = 64
    n_c: int = 64
    m_r: int = 32
    m_c: int = 32
    stages: int = 5
    channels: int = 32
    scheme: str = "learnable"
    window: tuple[int, int] = (4, 16)
    pool: int = 2
    head_dim: int = 16
    csa_beta: int = 16
    ffn_expansion: int = 2
    use_cssc: bool = True
    use_hf: bool = True
    use_lf: bool = True
    use_csa: bool = True

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("need at least one stage")

    @property
    def sampling_ratio(self) -> float:
        return (self.m_r * self.m_c) / (self.n_r * self.n_c)

    def denoiser_config(self, stage: int) -> DenoiserConfig:
        # Window orientation alternates per stage: 4x16 on odd stages
        # (1-based), 16x4 on even ones. Stage 1 never receives a bundle, so
        # it is built without cross-stage fusion weights.
        window = self.window if stage % 2 == 0 else self.window[::-1]
        return DenoiserConfig(
            channels=self.channels,
            window=window,
            pool=self.pool,
            head_dim=self.head_dim,
            csa_beta=self.csa_beta,
            ffn_expansion=self.ffn_expansion,
            use_cssc=self.use_cssc and stage > 0,
            use_hf=self.use_hf,
            use_lf=self.use_lf,
            use_csa=self.use_csa,
        )


def measurements_for_ratio(n: int, sr: float) -> int:
    """Per-axis measurement count giving sampling ratio ~sr on a square grid."""
    if not 0 < sr <= 1:
        raise ValueError(f"sampling ratio must be in (0, 1], got {sr}")
    return max(1, round(n * float(np.sqrt(sr))))


class HATNet(nn.Module):
    """Unfolded reconstruction network over a factored measurement pair."""

    def __init__(self, cfg: HatnetConfig, pair: FactorPair | None = None):
        super().__init__()
        self.cfg = cfg
        if pair is None:
            pair = build_factor_pair(cfg.n_r, cfg.n_c, cfg.m_r, cfg.m_c, scheme=cfg.scheme)
        if pair.image_shape != (cfg.n_r, cfg.n_c) or pair.measurement_shape != (
            cfg.m_r,
            cfg.m_c,
        ):
            raise ValueError("factor pair does not match the configured geometry")
        phi = torch.from_numpy(np.array(pair.phi)).float()
        psi = torch.from_numpy(np.array(pair.psi)).float()
        if cfg.scheme == "learnable":
            self.phi = nn.Parameter(phi)
            self.psi = nn.Parameter(psi)
        else:
            self.register_buffer("phi", phi)
            self.register_buffer("psi", psi)
        self.rho = nn.Parameter(torch.ones(cfg.stages))
        self.denoisers = nn.ModuleList(
            [StageDenoiser(cfg.denoiser_config(k)) for k in range(cfg.stages)]
        )

    @property
    def trainable_pair(self) -> bool:
        return isinstance(self.phi, nn.Parameter)

    def factor_pair(self) -> FactorPair:
        return FactorPair(
            phi=self.phi.detach().cpu().double().numpy(),
            psi=self.psi.detach().cpu().double().numpy(),
            scheme=self.cfg.scheme,
        )

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        return self.phi.transpose(0, 1) @ y @ self.psi

    def gradient_step(self, x: torch.Tensor, y: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
        residual = y - self.phi @ x @ self.psi.transpose(0, 1)
        return x + rho * self.adjoint(residual)

    def forward(self, y: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Reconstruct from measurements (B, 1, m_r, m_c).

        Returns the final estimate and the per-stage estimates X_1..X_K.
        """
        if y.ndim != 4 or y.shape[-2:] != (self.cfg.m_r, self.cfg.m_c):
            raise ValueError(
                f"expected measurements (B, 1, {self.cfg.m_r}, {self.cfg.m_c}), "
                f"got {tuple(y.shape)}"
            )
        y = y.to(self.phi.dtype)
        x = self.adjoint(y)
        stages = []
        bundle = None
        for k in range(self.cfg.stages):
            z = self.gradient_step(x, y, self.rho[k])
            x, bundle = self.denoisers[k](z, bundle)
            if not torch.isfinite(x).all():
                raise StageDivergence(k + 1)
            stages.append(x)
        return x, stages


def build_hatnet(cfg: HatnetConfig, seed: int = 0) -> HATNet:
    """Deterministically initialized HATNet.

    Step sizes start at 1, projection/convolution weights follow torch's
    fan-in-scaled uniform init, and the factor pair comes from the sequency-
    ordered Hadamard construction.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return HATNet(cfg)


def reconstruct(model: HATNet, y: np.ndarray) -> np.ndarray:
    """Single-measurement convenience wrapper over numpy arrays."""
    model.eval()
    with torch.no_grad():
        yt = torch.from_numpy(np.asarray(y, dtype=np.float32))[None, None]
        x, _ = model(yt)
    return x[0, 0].cpu().numpy().astype(np.float64)
