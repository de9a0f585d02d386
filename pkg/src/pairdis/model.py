"""Shared-parameter twin VAE over image pairs.

One encoder/decoder parameter set serves both branches. The encoder is three
valid convolutions with 2x2 max pools between them (each conv kernel is
clamped to the incoming spatial size, which is what lets the last stage land
on 1x1), followed by four 1x1-conv heads: common mean, common log-variance,
specific mean, specific log-variance. The decoder mirrors the encoder with
transposed convolutions and nearest-neighbor upsampling, ending in a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    conv2d_transpose,
    maximum_const,
    maxpool2,
    sigmoid,
    upsample2,
)

_TAG_MODEL = 515


class ConfigError(ValueError):
    """Model configuration cannot produce a consistent spatial ledger."""


@dataclass
class ModelConfig:
    image_hw: int = 28
    conv_channels: tuple = (20, 50, 500)
    kernel: int = 5
    latent_common: int = 20
    latent_specific: int = 10
    sigma_floor: float = 1e-6
    dtype: str = "float32"
    in_channels: int = 1  # 2 for the concatenated-pair reconstruction baseline

    def __post_init__(self):
        if self.latent_common < 1 or self.latent_specific < 1:
            raise ConfigError("latent dims must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if len(self.conv_channels) != 3:
            raise ConfigError("conv_channels must name three stages")
        self.ledger = self._spatial_ledger()
        self.kernels = self._effective_kernels()

    def _effective_kernels(self) -> tuple:
        ks, s = [], self.image_hw
        for stage in range(3):
            k = min(self.kernel, s)
            ks.append(k)
            s = s - k + 1
            if stage < 2:
                if s % 2:
                    raise ConfigError(
                        f"stage {stage}: spatial size {s} not poolable (image_hw="
                        f"{self.image_hw}, kernel={self.kernel})")
                s //= 2
        if s != 1:
            raise ConfigError(
                f"final conv leaves spatial size {s}, expected 1 "
                f"(image_hw={self.image_hw}, kernel={self.kernel})")
        return tuple(ks)

    def _spatial_ledger(self) -> tuple:
        sizes, s = [self.image_hw], self.image_hw
        for stage in range(3):
            s = s - min(self.kernel, s) + 1
            sizes.append(s)
            if stage < 2:
                if s % 2:
                    break
                s //= 2
                sizes.append(s)
        return tuple(sizes)

    def to_json(self) -> dict:
        return {"image_hw": self.image_hw, "conv_channels": list(self.conv_channels),
                "kernel": self.kernel, "latent_common": self.latent_common,
                "latent_specific": self.latent_specific,
                "sigma_floor": self.sigma_floor, "dtype": self.dtype,
                "in_channels": self.in_channels}

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class PosteriorPair:
    """Diagonal-Gaussian posteriors for one batch of images."""
    mu_c: Tensor  # (B, M_c)
    sigma_c: Tensor  # (B, M_c), floored above sigma_floor
    mu_s: Tensor  # (B, M_s)
    sigma_s: Tensor  # (B, M_s)


@dataclass
class ModelParams:
    """Named parameter tensors; prefixes 'enc.' and 'dec.' partition the model."""
    tensors: dict = field(default_factory=dict)

    def encoder(self) -> list:
        return [t for n, t in self.tensors.items() if n.startswith("enc.")]

    def decoder(self) -> list:
        return [t for n, t in self.tensors.items() if n.startswith("dec.")]

    def all(self) -> list:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def as_arrays(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        for n, t in self.tensors.items():
            if n not in arrays:
                raise ShapeError(f"missing parameter {n} in checkpoint")
            a = np.asarray(arrays[n], dtype=t.data.dtype)
            if a.shape != t.data.shape:
                raise ShapeError(f"{n}: checkpoint shape {a.shape} vs model {t.data.shape}")
            t.data = a.copy()

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for n, t in self.tensors.items():
            nt = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
            out.tensors[n] = nt
        return out


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, unit sigma at the start."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_MODEL]))
    dt = np.float32 if cfg.dtype == "float32" else np.float64
    params = ModelParams()

    def add(name, shape, fan_in, scale=1.0):
        a = scale / np.sqrt(fan_in)
        params.tensors[name] = Tensor(
            rng.uniform(-a, a, size=shape).astype(dt), requires_grad=True, name=name)

    def add_zero(name, shape):
        params.tensors[name] = Tensor(np.zeros(shape, dtype=dt),
                                      requires_grad=True, name=name)

    c1, c2, c3 = cfg.conv_channels
    k1, k2, k3 = cfg.kernels
    mc, ms = cfg.latent_common, cfg.latent_specific
    add("enc.conv1.w", (c1, cfg.in_channels, k1, k1), fan_in=cfg.in_channels * k1 * k1)
    add_zero("enc.conv1.b", (c1,))
    add("enc.conv2.w", (c2, c1, k2, k2), fan_in=c1 * k2 * k2)
    add_zero("enc.conv2.b", (c2,))
    add("enc.conv3.w", (c3, c2, k3, k3), fan_in=c2 * k3 * k3)
    add_zero("enc.conv3.b", (c3,))
    for head, m in (("mu_c", mc), ("logvar_c", mc), ("mu_s", ms), ("logvar_s", ms)):
        add(f"enc.head.{head}.w", (m, c3, 1, 1), fan_in=c3)
        add_zero(f"enc.head.{head}.b", (m,))
    # decoder mirror: 1x1 projection, then tconv / upsample pairs back to the image
    add("dec.proj.w", (c3, mc + ms, 1, 1), fan_in=mc + ms)
    add_zero("dec.proj.b", (c3,))
    add("dec.tconv1.w", (c3, c2, k3, k3), fan_in=c3 * k3 * k3)
    add_zero("dec.tconv1.b", (c2,))
    add("dec.tconv2.w", (c2, c1, k2, k2), fan_in=c2 * k2 * k2)
    add_zero("dec.tconv2.b", (c1,))
    add("dec.tconv3.w", (c1, cfg.in_channels, k1, k1), fan_in=c1 * k1 * k1)
    add_zero("dec.tconv3.b", (cfg.in_channels,))
    return params


def _as_batch_images(x, cfg: ModelConfig) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if cfg.in_channels == 1:
        if t.data.ndim == 2:
            t = t.reshape(1, 1, *t.shape)
        elif t.data.ndim == 3:
            t = t.reshape(t.shape[0], 1, t.shape[1], t.shape[2])
    if (t.data.ndim != 4 or t.shape[1] != cfg.in_channels
            or t.shape[2] != cfg.image_hw or t.shape[3] != cfg.image_hw):
        raise ShapeError(
            f"expected (B, {cfg.in_channels}, {cfg.image_hw}, {cfg.image_hw}) "
            f"images, got {t.shape}")
    return t


def encode(x, params: ModelParams, cfg: ModelConfig) -> PosteriorPair:
    """Posterior parameters for a batch; sigma = exp(logvar/2) with a floor."""
    t = _as_batch_images(x, cfg)
    p = params.tensors
    h = conv2d(t, p["enc.conv1.w"], p["enc.conv1.b"]).relu()
    h = maxpool2(h)
    h = conv2d(h, p["enc.conv2.w"], p["enc.conv2.b"]).relu()
    h = maxpool2(h)
    h = conv2d(h, p["enc.conv3.w"], p["enc.conv3.b"]).relu()
    b = t.shape[0]

    def head(name, m):
        out = conv2d(h, p[f"enc.head.{name}.w"], p[f"enc.head.{name}.b"])
        return out.reshape(b, m)

    mu_c = head("mu_c", cfg.latent_common)
    mu_s = head("mu_s", cfg.latent_specific)
    sigma_c = maximum_const((head("logvar_c", cfg.latent_common) * 0.5).exp(),
                            cfg.sigma_floor)
    sigma_s = maximum_const((head("logvar_s", cfg.latent_specific) * 0.5).exp(),
                            cfg.sigma_floor)
    return PosteriorPair(mu_c, sigma_c, mu_s, sigma_s)


def reparameterize(post: PosteriorPair, eps_c, eps_s) -> tuple:
    """z = mu + sigma * eps; eps is a constant, so gradients reach mu and sigma only."""
    ec = eps_c if isinstance(eps_c, Tensor) else Tensor(np.asarray(eps_c))
    es = eps_s if isinstance(eps_s, Tensor) else Tensor(np.asarray(eps_s))
    if ec.data.shape != post.mu_c.shape or es.data.shape != post.mu_s.shape:
        raise ShapeError(
            f"eps shapes {ec.shape}/{es.shape} vs latent {post.mu_c.shape}/{post.mu_s.shape}")
    ec.requires_grad = False
    es.requires_grad = False
    return post.mu_c + post.sigma_c * ec, post.mu_s + post.sigma_s * es


def decode(z_c: Tensor, z_s: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Reconstruction mean in (0,1), shaped like the input images."""
    if z_c.shape[1] != cfg.latent_common or z_s.shape[1] != cfg.latent_specific:
        raise ShapeError(f"latent dims {z_c.shape}/{z_s.shape} do not match config")
    p = params.tensors
    b = z_c.shape[0]
    z = concat([z_c, z_s], axis=1).reshape(b, cfg.latent_common + cfg.latent_specific, 1, 1)
    h = conv2d(z, p["dec.proj.w"], p["dec.proj.b"]).relu()
    h = conv2d_transpose(h, p["dec.tconv1.w"], p["dec.tconv1.b"]).relu()
    h = upsample2(h)
    h = conv2d_transpose(h, p["dec.tconv2.w"], p["dec.tconv2.b"]).relu()
    h = upsample2(h)
    h = conv2d_transpose(h, p["dec.tconv3.w"], p["dec.tconv3.b"])
    return sigmoid(h)


def reconstruct(x, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Deterministic (eps = 0) encode/decode round trip; keeps the model dtype."""
    post = encode(x, params, cfg)
    z_c, z_s = reparameterize(
        post, np.zeros(post.mu_c.shape, dtype=post.mu_c.data.dtype),
        np.zeros(post.mu_s.shape, dtype=post.mu_s.data.dtype))
    return decode(z_c, z_s, params, cfg)
