"""Defender network (encoder -> noise injection -> {predictor, decoder}).

Architecture: nine 3x3 stride-1 convolutions with spatial-size-preserving
padding and ReLU (channels 64,128,128,256,256,256, max-pool k=3, then
256,256,256), a predictor head (max-pool k=3, linear to num_classes) and a
three-layer transposed-conv decoder whose output is forced to the input
shape. With 32x32 or 28x28 inputs the predictor's flattened input is 2304.

Also defines the Gaussian latent-noise layer (reparameterized mu + sigma*eps
with sigma kept positive through softplus) and ModelParameters, the named
tensor map partitioned into {encoder, decoder, predictor, noise} groups.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rng import generator

GROUPS = ("encoder", "decoder", "predictor", "noise")
SHARED_GROUPS = ("encoder", "predictor")

ENCODER_PRE_POOL = (64, 128, 128, 256, 256, 256)
ENCODER_POST_POOL = (256, 256, 256)
LATENT_CHANNELS = 256


def _pool3(size: int) -> int:
    return (size - 3) // 3 + 1


@dataclass
class ArchitectureConfig:
    """Shape contract for the defender network.

    final_deconv_kernel defaults per input size (2 for 32x32, 4 for 28x28,
    2 otherwise); any size is allowed as long as the pooling arithmetic
    stays positive.
    """

    input_shape: tuple  # (C, H, W)
    num_classes: int
    final_deconv_kernel: int = None

    def __post_init__(self):
        c, h, w = self.input_shape
        if h != w:
            raise ValueError("only square inputs are supported")
        if min(c, h, w) < 1 or self.num_classes < 2:
            raise ValueError("invalid architecture dimensions")
        if self.latent_size < 1 or self.predictor_pool_size < 1:
            raise ValueError(
                f"input size {h} yields non-positive feature maps after pooling"
            )
        if self.final_deconv_kernel is None:
            self.final_deconv_kernel = {32: 2, 28: 4}.get(h, 2)

    @property
    def latent_size(self) -> int:
        return _pool3(self.input_shape[1])

    @property
    def latent_shape(self) -> tuple:
        return (LATENT_CHANNELS, self.latent_size, self.latent_size)

    @property
    def predictor_pool_size(self) -> int:
        return _pool3(self.latent_size)

    @property
    def predictor_in_features(self) -> int:
        return LATENT_CHANNELS * self.predictor_pool_size ** 2


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------

class ModelParameters:
    """Named map parameter-name -> tensor, partitioned by leading group prefix.

    Holds detached copies (parameters and buffers). Group membership is the
    first dotted component of the name and must be one of GROUPS.
    """

    def __init__(self, tensors: "OrderedDict[str, torch.Tensor]"):
        self.tensors = OrderedDict(tensors)
        for name in self.tensors:
            if self.group_of(name) not in GROUPS:
                raise ValueError(f"parameter {name!r} belongs to no known group")

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    @classmethod
    def from_module(cls, module: nn.Module) -> "ModelParameters":
        tensors = OrderedDict()
        for name, p in module.named_parameters():
            tensors[name] = p.detach().clone()
        for name, b in module.named_buffers():
            tensors[name] = b.detach().clone()
        return cls(tensors)

    def load_into(self, module: nn.Module, strict: bool = False):
        """Copy stored values into matching parameters/buffers of module."""
        targets = dict(module.named_parameters())
        targets.update(dict(module.named_buffers()))
        missing = [n for n in self.tensors if n not in targets]
        if strict and missing:
            raise KeyError(f"module lacks parameters {missing}")
        with torch.no_grad():
            for name, value in self.tensors.items():
                if name in targets:
                    targets[name].copy_(value)

    def groups(self) -> dict:
        out = {g: [] for g in GROUPS}
        for name in self.tensors:
            out[self.group_of(name)].append(name)
        return out

    def subset(self, groups) -> "ModelParameters":
        keep = set(groups)
        return ModelParameters(
            OrderedDict(
                (n, t) for n, t in self.tensors.items() if self.group_of(n) in keep
            )
        )

    def merge(self, other: "ModelParameters") -> "ModelParameters":
        merged = OrderedDict(self.tensors)
        merged.update(other.tensors)
        return ModelParameters(merged)

    def sub(self, other: "ModelParameters") -> "ModelParameters":
        """Elementwise self - other over the shared name set (must be equal)."""
        if set(self.tensors) != set(other.tensors):
            raise ValueError("parameter name sets differ")
        return ModelParameters(
            OrderedDict((n, self.tensors[n] - other.tensors[n]) for n in self.tensors)
        )

    def add_scaled(self, delta: "ModelParameters", scale: float = 1.0) -> "ModelParameters":
        out = OrderedDict(self.tensors)
        for n, d in delta.tensors.items():
            if n not in out:
                raise ValueError(f"unknown parameter {n!r} in delta")
            out[n] = out[n] + scale * d.to(out[n].dtype)
        return ModelParameters(out)

    def clone(self) -> "ModelParameters":
        return ModelParameters(
            OrderedDict((n, t.clone()) for n, t in self.tensors.items())
        )

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors.items())

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def allclose(self, other: "ModelParameters", atol=0.0, rtol=0.0) -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            torch.allclose(self.tensors[n].float(), other.tensors[n].float(),
                           atol=atol, rtol=rtol)
            for n in self.tensors
        )


def shared_parameters(params: ModelParameters,
                      groups=SHARED_GROUPS) -> ModelParameters:
    """The parameter groups transmitted to the server.

    Default is {encoder, predictor}: decoder and noise parameters stay
    private because the decoder is the defender's auditing branch, and
    handing it to the attacker would supply a reconstruction prior.
    FederationConfig.shared_groups overrides the set for ablations.
    """
    bad = [g for g in groups if g not in GROUPS]
    if bad:
        raise ValueError(f"unknown parameter groups {bad}")
    return params.subset(tuple(groups))


# ---------------------------------------------------------------------------
# Latent noise
# ---------------------------------------------------------------------------

def _softplus_inv(y: float) -> float:
    if y <= 0:
        raise ValueError("sigma must be positive")
    return math.log(math.expm1(y))


class NoiseSpec(nn.Module):
    """Additive Gaussian latent noise z ~ N(mu, sigma^2), reparameterized.

    mode="fixed": scalar mu/sigma, not trainable. mode="learnable":
    per-element vectors of length m = prod(latent_shape), trainable.
    sigma is stored as an unconstrained rho with sigma = softplus(rho), so
    positivity survives any gradient step.
    """

    def __init__(self, mode: str = "fixed", mu0: float = 1.0, sigma0: float = 0.1,
                 latent_shape: tuple = None):
        super().__init__()
        if mode not in ("fixed", "learnable"):
            raise ValueError(f"unknown noise mode {mode!r}")
        if mode == "learnable" and latent_shape is None:
            raise ValueError("learnable noise requires latent_shape")
        self.mode = mode
        self.latent_shape = tuple(latent_shape) if latent_shape else None
        self.init = (float(mu0), float(sigma0))
        rho0 = _softplus_inv(sigma0)
        if mode == "fixed":
            self.mu = nn.Parameter(torch.tensor(float(mu0)), requires_grad=False)
            self.rho = nn.Parameter(torch.tensor(rho0), requires_grad=False)
        else:
            m = int(torch.tensor(self.latent_shape).prod())
            self.mu = nn.Parameter(torch.full((m,), float(mu0)))
            self.rho = nn.Parameter(torch.full((m,), rho0))

    @property
    def sigma(self) -> torch.Tensor:
        return F.softplus(self.rho)

    def sample(self, shape: tuple, gen: torch.Generator) -> torch.Tensor:
        """Draw z = mu + sigma * eps with eps ~ N(0, I), shaped [B, *latent]."""
        eps = torch.randn(shape, generator=gen)
        if self.mode == "fixed":
            return self.mu + self.sigma * eps
        if tuple(shape[1:]) != self.latent_shape:
            raise ValueError(
                f"latent shape {tuple(shape[1:])} != spec shape {self.latent_shape}"
            )
        mu = self.mu.view(1, *self.latent_shape)
        sigma = self.sigma.view(1, *self.latent_shape)
        return mu + sigma * eps

    def snapshot(self) -> dict:
        """Plain-tensor state for serialization."""
        return {
            "mode": self.mode,
            "latent_shape": self.latent_shape,
            "init": self.init,
            "mu": self.mu.detach().clone(),
            "rho": self.rho.detach().clone(),
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "NoiseSpec":
        spec = cls(
            mode=snap["mode"],
            mu0=snap["init"][0],
            sigma0=snap["init"][1],
            latent_shape=snap["latent_shape"],
        )
        with torch.no_grad():
            spec.mu.copy_(snap["mu"].reshape(spec.mu.shape))
            spec.rho.copy_(snap["rho"].reshape(spec.rho.shape))
        return spec


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def _build_encoder(arch: ArchitectureConfig) -> nn.Sequential:
    layers = []
    in_ch = arch.input_shape[0]
    for out_ch in ENCODER_PRE_POOL:
        layers += [nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1),
                   nn.ReLU()]
        in_ch = out_ch
    layers.append(nn.MaxPool2d(kernel_size=3))
    for out_ch in ENCODER_POST_POOL:
        layers += [nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1),
                   nn.ReLU()]
        in_ch = out_ch
    return nn.Sequential(*layers)


def _build_predictor(arch: ArchitectureConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.MaxPool2d(kernel_size=3),
        nn.Flatten(),
        nn.Linear(arch.predictor_in_features, arch.num_classes),
    )


class Decoder(nn.Module):
    """Three transposed convolutions; output forced to the input shape.

    The raw deconv arithmetic lands at 30x30 for both supported sizes, so
    the final feature map is symmetrically zero-padded or center-cropped.
    """

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        c = arch.input_shape[0]
        self.out_size = arch.input_shape[1]
        self.deconv1 = nn.ConvTranspose2d(LATENT_CHANNELS, 256, kernel_size=3, stride=1)
        self.bn1 = nn.BatchNorm2d(256)
        self.deconv2 = nn.ConvTranspose2d(256, 256, kernel_size=4, stride=1)
        self.bn2 = nn.BatchNorm2d(256)
        self.deconv3 = nn.ConvTranspose2d(
            256, c, kernel_size=arch.final_deconv_kernel, stride=2
        )

    def forward(self, z):
        h = F.relu(self.bn1(self.deconv1(z)))
        h = F.relu(self.bn2(self.deconv2(h)))
        h = self.deconv3(h)
        diff = self.out_size - h.shape[-1]
        if diff > 0:
            lo, hi = diff // 2, diff - diff // 2
            h = F.pad(h, (lo, hi, lo, hi))
        elif diff < 0:
            lo = (-diff) // 2
            h = h[..., lo:lo + self.out_size, lo:lo + self.out_size]
        return h


@dataclass
class ForwardOutput:
    reconstruction: torch.Tensor
    logits: torch.Tensor
    latent: torch.Tensor
    noisy_latent: torch.Tensor = field(default=None)


class DefenderModel(nn.Module):
    """Full defender: encoder, latent noise, predictor and decoder branches.

    The perturbed latent feeds both the predictor and the decoder.
    """

    def __init__(self, arch: ArchitectureConfig, noise: NoiseSpec = None):
        super().__init__()
        self.arch = arch
        self.encoder = _build_encoder(arch)
        self.noise = noise if noise is not None else NoiseSpec("fixed")
        self.predictor = _build_predictor(arch)
        self.decoder = Decoder(arch)

    def forward(self, x, noise_mode: str = "off", gen: torch.Generator = None,
                seed: int = None, spec: NoiseSpec = None,
                with_reconstruction: bool = True) -> ForwardOutput:
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ValueError(
                f"batch shape {tuple(x.shape[1:])} != arch {self.arch.input_shape}"
            )
        latent = self.encoder(x)
        spec = spec if spec is not None else self.noise
        if noise_mode == "sampled":
            if gen is None:
                if seed is None:
                    raise ValueError("sampled noise requires a generator or seed")
                gen = generator(seed)
            noisy = latent + spec.sample(latent.shape, gen)
        elif noise_mode == "off":
            noisy = latent
        else:
            raise ValueError(f"unknown noise_mode {noise_mode!r}")
        logits = self.predictor(noisy)
        # Clients that never read the reconstruction skip the decoder, which
        # also keeps its batch-norm buffers at their initial values.
        reconstruction = self.decoder(noisy) if with_reconstruction else None
        return ForwardOutput(reconstruction, logits, latent, noisy)


class SharedClassifier(nn.Module):
    """Attacker-side surrogate holding only the shared groups.

    No noise layer and no decoder: those parameters are never transmitted,
    so the white-box attacker cannot include them in its forward model.
    Parameter names align with DefenderModel's encoder/predictor groups.
    """

    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        self.encoder = _build_encoder(arch)
        self.predictor = _build_predictor(arch)

    def forward(self, x):
        return self.predictor(self.encoder(x))


# ---------------------------------------------------------------------------
# Deterministic initialization
# ---------------------------------------------------------------------------

def _fan_in(weight: torch.Tensor) -> int:
    if weight.ndim < 2:
        return weight.numel()
    receptive = 1
    for s in weight.shape[2:]:
        receptive *= s
    return weight.shape[1] * receptive


def init_parameters(module: nn.Module, seed: int):
    """Re-initialize all weights from an explicit generator.

    Matches the standard uniform fan-in scheme (bound = 1/sqrt(fan_in))
    for conv/linear layers; norm layers reset to identity.
    """
    g = generator(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                bound = 1.0 / math.sqrt(_fan_in(m.weight))
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
                if m.weight is not None:
                    m.weight.fill_(1.0)
                    m.bias.fill_(0.0)
                if m.running_mean is not None:
                    m.running_mean.zero_()
                    m.running_var.fill_(1.0)
                    m.num_batches_tracked.zero_()
    return module


def build_defender(arch: ArchitectureConfig, seed: int,
                   noise: NoiseSpec = None) -> tuple:
    """Construct a defender with deterministic initial weights.

    Returns (model, ModelParameters snapshot of the initial state).
    """
    model = DefenderModel(arch, noise=noise)
    init_parameters(model, seed)
    return model, ModelParameters.from_module(model)


def build_surrogate(arch: ArchitectureConfig, shared: ModelParameters) -> SharedClassifier:
    """Attacker surrogate loaded with observed shared parameters."""
    surrogate = SharedClassifier(arch)
    shared.load_into(surrogate)
    return surrogate
