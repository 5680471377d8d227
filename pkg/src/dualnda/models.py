"""Desk-scale conditional generator/discriminator with a continuous label embedding.

The label embedding is a stand-in for the improved label input of the
CcGAN line: fixed Fourier features of y followed by a two-stage MLP. The
generator feeds the embedding into the stem and into conditional batch norm
(per-channel gain and bias) after every conv; the discriminator uses
projection conditioning on pooled features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parametrize

from .errors import DomainError

N_FREQ = 8


@dataclass(frozen=True)
class NetSpec:
    resolution: int = 32
    channels: int = 1
    z_dim: int = 128
    embed_dim: int = 128
    g_ch: int = 16
    d_ch: int = 16
    spectral_norm: bool = True
    variant: str = "vanilla"

    @property
    def n_down(self) -> int:
        n = int(round(math.log2(self.resolution / 4)))
        if 4 * 2 ** n != self.resolution or n < 1:
            raise DomainError(f"resolution must be 4 * 2**k with k >= 1, got {self.resolution}")
        return n

    def to_dict(self) -> dict:
        return asdict(self)


class LabelEmbedding(nn.Module):
    def __init__(self, embed_dim: int = 128, hidden: int = 64):
        super().__init__()
        self.register_buffer("freqs", 2 * math.pi * torch.arange(1, N_FREQ + 1, dtype=torch.float32))
        self.net = nn.Sequential(
            nn.Linear(2 * N_FREQ + 1, hidden), nn.ReLU(),
            nn.Linear(hidden, embed_dim), nn.ReLU(),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        y = y.reshape(-1, 1).to(self.freqs.dtype)
        a = y * self.freqs
        return self.net(torch.cat([y, torch.sin(a), torch.cos(a)], dim=1))


class ExactSpectralNorm(nn.Module):
    """W / sigma_max(W), with W reshaped to (out, -1) and sigma from a full SVD.

    Power iteration lags behind the weights on these small, nearly square
    layers; an exact SVD is cheap at this size and keeps sigma at 1.
    """

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return w / torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2)


def _sn(layer: nn.Module, on: bool) -> nn.Module:
    if on:
        parametrize.register_parametrization(layer, "weight", ExactSpectralNorm())
    return layer


class Generator(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        c = spec.g_ch
        widths = [c * 4] + [max(c, c * 4 >> (i + 1)) for i in range(spec.n_down)] + [c]
        self.c0 = widths[0]
        self.embed = LabelEmbedding(spec.embed_dim)
        self.fc_z = nn.Linear(spec.z_dim, widths[0] * 16)
        self.fc_y = nn.Linear(spec.embed_dim, widths[0] * 16, bias=False)
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.gains = nn.ModuleList()
        self.biases = nn.ModuleList()
        self.upsample = []
        for i in range(len(widths) - 1):
            self.convs.append(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1))
            # conditional batch norm: the label sets each channel's gain and bias
            self.norms.append(nn.BatchNorm2d(widths[i + 1], affine=False))
            self.gains.append(nn.Linear(spec.embed_dim, widths[i + 1], bias=False))
            self.biases.append(nn.Linear(spec.embed_dim, widths[i + 1], bias=False))
            self.upsample.append(i < spec.n_down)
        self.to_img = nn.Conv2d(widths[-1], spec.channels, 3, padding=1)

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        e = self.embed(y)
        h = (self.fc_z(z) + self.fc_y(e)).view(-1, self.c0, 4, 4)
        for conv, norm, gain, bias, up in zip(self.convs, self.norms, self.gains, self.biases, self.upsample):
            if up:
                h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = norm(conv(h)) * (1 + gain(e)[:, :, None, None]) + bias(e)[:, :, None, None]
            h = torch.relu(h)
        return torch.tanh(self.to_img(h))


class Discriminator(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        sn = spec.spectral_norm
        c = spec.d_ch
        widths = [c] + [min(c * 2 ** (i + 1), c * 4) for i in range(spec.n_down)]
        layers = [_sn(nn.Conv2d(spec.channels, widths[0], 3, padding=1), sn), nn.LeakyReLU(0.2)]
        for i in range(spec.n_down):
            layers += [_sn(nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1), sn), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*layers)
        self.feat_dim = widths[-1]
        self.head = _sn(nn.Linear(self.feat_dim, 1), sn)
        self.embed = LabelEmbedding(spec.embed_dim)
        self.proj = nn.Linear(spec.embed_dim, self.feat_dim, bias=False)

    def logits(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        phi = self.trunk(x).sum(dim=(2, 3))
        return self.head(phi).squeeze(1) + (self.proj(self.embed(y)) * phi).sum(dim=1)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        s = self.logits(x, y)
        return torch.sigmoid(s) if self.spec.variant == "vanilla" else s


def build_models(spec: NetSpec, seed: int) -> tuple[Generator, Discriminator]:
    torch.manual_seed(seed)
    return Generator(spec), Discriminator(spec)


def n_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_labels(labels: torch.Tensor, n: int) -> None:
    if labels.shape[0] != n:
        raise DomainError(f"batch size mismatch: {n} inputs but {labels.shape[0]} labels")
    if torch.any(labels < 0) or torch.any(labels > 1):
        raise DomainError("labels must lie in [0, 1]")


EVAL_CHUNK = 64


def _fixed_shape(fn, chunk: int, *args: torch.Tensor) -> torch.Tensor:
    """Evaluate ``fn`` on zero-padded chunks of exactly ``chunk`` rows.

    BLAS picks different kernels for different batch sizes, so a plain
    batched call is not bit-identical to stacked single calls. Holding the
    shape fixed makes every row's result independent of its neighbours.
    """
    n = args[0].shape[0]
    outs = []
    for st in range(0, n, chunk):
        parts = [a[st:st + chunk] for a in args]
        k = parts[0].shape[0]
        if k < chunk:
            parts = [torch.cat([p, p.new_zeros((chunk - k,) + p.shape[1:])]) for p in parts]
        outs.append(fn(*parts)[:k])
    return torch.cat(outs) if outs else fn(*args)


@torch.no_grad()
def generate(gen: Generator, z, labels, chunk: int = EVAL_CHUNK) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.float32).reshape(-1)
    if z.ndim != 2 or z.shape[1] != gen.spec.z_dim:
        raise DomainError(f"z must have shape (n, {gen.spec.z_dim}), got {tuple(z.shape)}")
    _check_labels(labels, z.shape[0])
    was = gen.training
    gen.eval()  # running batch-norm statistics keep each output independent of its batch
    try:
        return _fixed_shape(gen, chunk, z, labels)
    finally:
        gen.train(was)


@torch.no_grad()
def discriminate(disc: Discriminator, images, labels, chunk: int = EVAL_CHUNK) -> torch.Tensor:
    images = torch.as_tensor(images, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.float32).reshape(-1)
    _check_labels(labels, images.shape[0])
    was = disc.training
    disc.eval()
    try:
        return _fixed_shape(disc, chunk, images, labels)
    finally:
        disc.train(was)


def top_singular_values(module: nn.Module) -> list[float]:
    """Largest singular value of every spectrally normalized weight, as used in forward."""
    out = []
    with torch.no_grad():
        for m in module.modules():
            if parametrize.is_parametrized(m, "weight"):
                w = m.weight.double()
                out.append(float(torch.linalg.matrix_norm(w.reshape(w.shape[0], -1), ord=2)))
    return out


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in tensors.items()})
