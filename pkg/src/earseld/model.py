"""Echo-aware refinement network.

Parts, named after their role in the training objective:

* ``F`` feature extractor: CNN over (7, T, mels) -> per-frame vectors
* ``G`` echo autoencoder: echo feature map -> 16-d embedding z (+ decoder)
* ``R`` refiner: bidirectional GRU over [f, z] -> refined frames f'
* ``C`` / ``D`` SED and DOA heads
* ``H`` domain classifier behind a gradient reversal layer
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_classes: int = 12
    d_echo: int = 16
    in_channels: int = 7
    n_mels: int = 64
    cnn_filters: int = 64
    freq_pool: tuple = (4, 4, 2)
    time_pool: tuple = (5, 1, 1)
    rnn_hidden: int = 256
    rnn_layers: int = 2
    head_hidden: int = 128
    echo_filters: tuple = (16, 32, 64, 4)
    echo_frames: int = 224
    echo_mels: int = 64
    domain_hidden: tuple = (512, 128)
    dropout: float = 0.05
    use_echo: bool = True
    use_domain: bool = True

    def __post_init__(self):
        self.freq_pool = tuple(self.freq_pool)
        self.time_pool = tuple(self.time_pool)
        self.echo_filters = tuple(self.echo_filters)
        self.domain_hidden = tuple(self.domain_hidden)
        if len(self.freq_pool) != len(self.time_pool):
            raise ShapeError("freq_pool and time_pool need one entry per CNN block")
        if self.n_mels % int(np.prod(self.freq_pool)):
            raise ShapeError("mel bins must be divisible by the total frequency pooling")
        down = 2 ** len(self.echo_filters)
        if self.echo_frames % down or self.echo_mels % down:
            raise ShapeError(f"echo input must be divisible by {down} in both axes")

    @property
    def time_reduction(self) -> int:
        return int(np.prod(self.time_pool))

    @property
    def feature_dim(self) -> int:
        return self.cnn_filters * self.n_mels // int(np.prod(self.freq_pool))

    @property
    def refined_dim(self) -> int:
        return 2 * self.rnn_hidden

    @property
    def echo_bottleneck(self) -> tuple:
        down = 2 ** len(self.echo_filters)
        return (self.echo_filters[-1], self.echo_frames // down, self.echo_mels // down)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("freq_pool", "time_pool", "echo_filters", "domain_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def miniature(cls, **kw) -> "ModelConfig":
        """Tiny graph for finite-difference gradient checks."""
        base = dict(
            n_classes=2, cnn_filters=8, freq_pool=(4,), time_pool=(5,), n_mels=16, rnn_hidden=8,
            rnn_layers=1, head_hidden=8, echo_filters=(4, 4, 4, 2), echo_frames=32, echo_mels=16,
            domain_hidden=(16, 8), d_echo=4, dropout=0.0,
        )
        base.update(kw)
        return cls(**base)


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = float(lam)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * -ctx.lam, None


def grl(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; gradient multiplied by ``-lam`` backward."""
    if lam < 0:
        raise ValueError("gradient reversal scale must be non-negative")
    return GradientReversal.apply(x, lam)


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, pool, dropout=0.0):
        super().__init__()
        # BatchNorm removes any per-channel offset, so a conv bias would be dead weight
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.pool = tuple(pool)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        return self.dropout(F.max_pool2d(x, self.pool))


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.in_channels] + [cfg.cnn_filters] * len(cfg.freq_pool)
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], (cfg.time_pool[i], cfg.freq_pool[i]), cfg.dropout)
            for i in range(len(cfg.freq_pool))
        )
        self.n_mels = cfg.n_mels
        self.in_channels = cfg.in_channels

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[3] != self.n_mels:
            raise ShapeError(f"expected (B, {self.in_channels}, T, {self.n_mels}), got {tuple(x.shape)}")
        for block in self.blocks:
            x = block(x)
        b, c, t, m = x.shape
        return x.permute(0, 2, 1, 3).reshape(b, t, c * m)


class EchoAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc = [cfg.in_channels] + list(cfg.echo_filters)
        self.encoder = nn.ModuleList(ConvBlock(enc[i], enc[i + 1], (2, 2)) for i in range(len(cfg.echo_filters)))
        self.bottleneck = cfg.echo_bottleneck
        flat = int(np.prod(self.bottleneck))
        self.to_z = nn.Linear(flat, cfg.d_echo)
        self.from_z = nn.Linear(cfg.d_echo, flat)
        # mirror of the encoder: 4 -> 64 -> 32 -> 16 -> 7 for the default config
        dec = [cfg.echo_filters[-1]] + list(cfg.echo_filters[-2::-1]) + [cfg.in_channels]
        n_dec = len(dec) - 1
        self.decoder = nn.ModuleList(
            nn.Conv2d(dec[i], dec[i + 1], kernel_size=3, stride=1, padding=1, bias=i == n_dec - 1)
            for i in range(n_dec)
        )
        self.decoder_bn = nn.ModuleList(nn.BatchNorm2d(dec[i + 1]) for i in range(len(dec) - 2))
        self.input_shape = (cfg.in_channels, cfg.echo_frames, cfg.echo_mels)

    def encode(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"echo features must be {self.input_shape}, got {tuple(x.shape[1:])}")
        for block in self.encoder:
            x = block(x)
        return self.to_z(x.flatten(1))

    def decode(self, z):
        x = self.from_z(z).view(z.shape[0], *self.bottleneck)
        for i, conv in enumerate(self.decoder):
            x = conv(F.interpolate(x, scale_factor=2, mode="nearest"))
            if i < len(self.decoder_bn):
                x = F.relu(self.decoder_bn[i](x))
        return x

    def forward(self, x):
        z = self.encode(x)
        return z, self.decode(z)


class Refiner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.z_dim = cfg.d_echo if cfg.use_echo else 0
        self.input_dim = cfg.feature_dim + self.z_dim
        self.rnn = nn.GRU(
            self.input_dim, cfg.rnn_hidden, num_layers=cfg.rnn_layers, batch_first=True,
            bidirectional=True, dropout=cfg.dropout if cfg.rnn_layers > 1 else 0.0,
        )

    def forward(self, f, z=None):
        if self.z_dim:
            if z is None or z.shape[-1] != self.z_dim:
                raise ShapeError(f"refiner expects a {self.z_dim}-d echo embedding")
            f = torch.cat([f, z[:, None, :].expand(-1, f.shape[1], -1)], dim=-1)
        elif z is not None:
            raise ShapeError("refiner was built without an echo embedding")
        if f.shape[-1] != self.input_dim:
            raise ShapeError(f"refiner input width {f.shape[-1]} != {self.input_dim}")
        out, _ = self.rnn(f)
        return out


class Head(nn.Module):
    """Two per-frame linear layers (no nonlinearity in between)."""

    def __init__(self, d_in, d_hidden, d_out, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(self.fc1(x)))


class DomainClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = [cfg.refined_dim] + list(cfg.domain_hidden) + [1]
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))

    def forward(self, f_refined, grl_lambda: float):
        x = grl(f_refined.mean(dim=1), grl_lambda)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return torch.sigmoid(x.squeeze(-1))


class EARNet(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.F = FeatureExtractor(cfg)
        self.G = EchoAutoencoder(cfg) if cfg.use_echo else None
        self.R = Refiner(cfg)
        self.C = Head(cfg.refined_dim, cfg.head_hidden, cfg.n_classes, cfg.dropout)
        self.D = Head(cfg.refined_dim, cfg.head_hidden, 3 * cfg.n_classes, cfg.dropout)
        self.H = DomainClassifier(cfg) if cfg.use_domain else None

    def extract(self, x):
        return self.F(x)

    def encode_echo(self, echo):
        if self.G is None:
            raise ShapeError("model has no echo autoencoder")
        return self.G(echo)

    def refine(self, f, z=None):
        return self.R(f, z)

    def heads(self, f_refined):
        return torch.sigmoid(self.C(f_refined)), torch.tanh(self.D(f_refined))

    def classify_domain(self, f_refined, grl_lambda: float = 0.0):
        if self.H is None:
            raise ShapeError("model has no domain classifier")
        return self.H(f_refined, grl_lambda)

    def forward(self, x, echo=None, grl_lambda: float = 0.0, with_domain: Optional[bool] = None):
        out = {}
        f = self.extract(x)
        z = None
        if self.G is not None:
            if echo is None:
                raise ShapeError("this model needs echo features")
            z, recon = self.encode_echo(echo)
            out["z"], out["echo_recon"] = z, recon
        f_refined = self.refine(f, z)
        out["f"], out["f_refined"] = f, f_refined
        out["sed"], out["doa"] = self.heads(f_refined)
        if with_domain is None:
            with_domain = self.training
        if self.H is not None and with_domain:
            out["domain"] = self.classify_domain(f_refined, grl_lambda)
        return out

    def partition(self) -> dict:
        """Trainable parameters grouped by network part."""
        parts = {"F": self.F, "G": self.G, "R": self.R, "C": self.C, "D": self.D, "H": self.H}
        return {k: list(m.parameters()) for k, m in parts.items() if m is not None}


def crop_echo_frames(values: np.ndarray, n_frames: int) -> np.ndarray:
    """Centre-crop (or symmetrically zero-pad) the frame axis of a (C, T, M) map."""
    t = values.shape[1]
    if t >= n_frames:
        start = (t - n_frames) // 2
        return values[:, start : start + n_frames]
    pad = n_frames - t
    return np.pad(values, ((0, 0), (pad // 2, pad - pad // 2), (0, 0)))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: EARNet, stats=None, seeds=None, extra=None) -> None:
    """Flat name -> array container plus JSON metadata, stored as ``.npz``."""
    arrays = {f"state/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "stats": stats.to_dict() if hasattr(stats, "to_dict") else stats,
        "seeds": seeds,
        "extra": extra or {},
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, meta)``; the model is in eval mode."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        state = {k[len("state/"):]: torch.from_numpy(np.array(data[k])) for k in data.files if k.startswith("state/")}
    model = EARNet(ModelConfig.from_dict(meta["model_config"]))
    if meta.get("dtype") == "float64":
        model = model.double()
    model.load_state_dict(state)
    model.eval()
    return model, meta
