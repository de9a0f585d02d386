"""Training objectives.

Every term follows the minimization sign convention and batch semantics of
"sum over feature/pixel dimensions, mean over the batch". One-dimensional
inputs are treated as a batch of one, so the closed-form examples in the test
suite evaluate exactly. Pair distances are computed on the common features
only; the specific features stay unconstrained by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ShapeError, Tensor, clamp, concat, maximum_const
from .model import PosteriorPair

DISTANCE_KINDS = ("modified_l2", "l2", "l1", "cosine", "mmd", "jeffreys")


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda1: float = 1.0  # weight of the pair-similarity term
    lambda2: float = 1.0  # weight of the activation term
    sparsity_s: float = 0.5
    distance_kind: str = "modified_l2"
    kl_weight: float = 1.0  # annealing scalar
    m_clamp_eps: float = 1e-6
    sigma_floor: float = 1e-6
    invmax_floor: float = 1e-6
    cosine_floor: float = 1e-6
    mmd_bandwidth_sq: float | None = None  # None: median heuristic per batch
    invmax_on: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise LossConfigError("lambda weights must be >= 0")
        if not 0.0 < self.sparsity_s < 1.0:
            raise LossConfigError(f"sparsity_s must lie in (0,1), got {self.sparsity_s}")
        if not 0.0 <= self.kl_weight <= 1.0:
            raise LossConfigError(f"kl_weight must lie in [0,1], got {self.kl_weight}")
        if self.distance_kind not in DISTANCE_KINDS:
            raise LossConfigError(
                f"distance_kind {self.distance_kind!r} not one of {DISTANCE_KINDS}")

    def with_kl_weight(self, w: float) -> "LossConfig":
        return replace(self, kl_weight=float(w))

    def to_json(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2,
                "sparsity_s": self.sparsity_s, "distance_kind": self.distance_kind,
                "kl_weight": self.kl_weight, "invmax_on": self.invmax_on}


@dataclass
class LossBreakdown:
    vae_A: float
    vae_B: float
    recon_A: float
    recon_B: float
    kl_c_A: float
    kl_c_B: float
    kl_s_A: float
    kl_s_B: float
    sim: float
    act_sparsity: float
    act_invmax: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def recomposition_error(self, cfg: LossConfig) -> float:
        expect = (self.vae_A + self.vae_B + cfg.lambda1 * self.sim
                  + cfg.lambda2 * (self.act_sparsity + self.act_invmax))
        return abs(self.total - expect) / max(abs(expect), 1e-12)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vae_A", "vae_B", "recon_A", "recon_B", "kl_c_A", "kl_c_B",
            "kl_s_A", "kl_s_B", "sim", "act_sparsity", "act_invmax", "total")}


def _as2d(t: Tensor) -> Tensor:
    if t.data.ndim == 1:
        return t.reshape(1, t.shape[0])
    if t.data.ndim != 2:
        raise ShapeError(f"expected vector or (batch, dim) tensor, got {t.shape}")
    return t


def _pair2d(a: Tensor, b: Tensor) -> tuple:
    a, b = _as2d(a), _as2d(b)
    if a.shape != b.shape:
        raise ShapeError(f"paired tensors differ in shape: {a.shape} vs {b.shape}")
    return a, b


def kl_std_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over dims, mean over the batch."""
    mu, sigma = _pair2d(mu, sigma)
    if np.any(sigma.data <= 0):
        raise ShapeError("sigma must be positive")
    per_sample = (mu.square() + sigma.square() - 1.0 - sigma.square().log()).sum(axis=1) * 0.5
    return per_sample.mean()


def vae_loss(x: Tensor, x_hat: Tensor, post: PosteriorPair, kl_weight: float) -> tuple:
    """Half squared reconstruction error plus annealed KL of both feature groups.

    Returns (loss tensor, parts dict of float recon/kl_c/kl_s).
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} vs input {x.shape}")
    b = x.shape[0] if x.data.ndim >= 3 else 1  # leading axis is the batch
    diff = (x - x_hat).square().sum() * (0.5 / b)
    kl_c = kl_std_normal(post.mu_c, post.sigma_c)
    kl_s = kl_std_normal(post.mu_s, post.sigma_s)
    loss = diff + (kl_c + kl_s) * kl_weight
    parts = {"recon": diff.item(), "kl_c": kl_c.item(), "kl_s": kl_s.item()}
    return loss, parts


def sim_modified_l2(post_a: PosteriorPair, post_b: PosteriorPair,
                    sigma_floor: float = 1e-6) -> Tensor:
    """Squared mean gap normalized by both standard deviations, averaged over dims."""
    mu_a, mu_b = _pair2d(post_a.mu_c, post_b.mu_c)
    sig_a, sig_b = _pair2d(post_a.sigma_c, post_b.sigma_c)
    denom = maximum_const(sig_a * sig_b, sigma_floor * sigma_floor)
    per_sample = ((mu_a - mu_b).square() / denom).mean(axis=1)
    return per_sample.mean()


def _jeffreys(post_a: PosteriorPair, post_b: PosteriorPair) -> Tensor:
    """Symmetric KL between diagonal Gaussians, summed over dims, batch mean."""
    mu_a, mu_b = _pair2d(post_a.mu_c, post_b.mu_c)
    sig_a, sig_b = _pair2d(post_a.sigma_c, post_b.sigma_c)
    va, vb = sig_a.square(), sig_b.square()
    d2 = (mu_a - mu_b).square()
    per_dim = ((va + d2) / vb + (vb + d2) / va) * 0.5 - 1.0
    return per_dim.sum(axis=1).mean()


def _cosine(post_a: PosteriorPair, post_b: PosteriorPair, floor: float) -> Tensor:
    mu_a, mu_b = _pair2d(post_a.mu_c, post_b.mu_c)
    dot = (mu_a * mu_b).sum(axis=1)
    norms = mu_a.square().sum(axis=1).sqrt() * mu_b.square().sum(axis=1).sqrt()
    return (1.0 - dot / maximum_const(norms, floor)).mean()


def mmd_median_bandwidth_sq(mu_a: np.ndarray, mu_b: np.ndarray) -> float:
    """Half the median pooled pairwise squared distance; floored away from zero."""
    pooled = np.concatenate([np.asarray(mu_a), np.asarray(mu_b)], axis=0)
    d2 = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    off = d2[~np.eye(len(pooled), dtype=bool)]
    return float(max(np.median(off) / 2.0, 1e-6))


def _mmd(post_a: PosteriorPair, post_b: PosteriorPair,
         bandwidth_sq: float | None) -> Tensor:
    """U-statistic RBF MMD^2 between the two batches of common means.

    All three kernel sums exclude i == j, so identical batches give exactly
    zero; the result is floored at zero to keep the distance non-negative.
    The bandwidth is a per-batch constant (no gradient through it).
    """
    mu_a, mu_b = _pair2d(post_a.mu_c, post_b.mu_c)
    m = mu_a.shape[0]
    if m < 2:
        raise ShapeError("mmd needs a batch of at least 2 pairs")
    if bandwidth_sq is None:
        bandwidth_sq = mmd_median_bandwidth_sq(mu_a.data, mu_b.data)

    def kernel_offdiag_sum(u: Tensor, v: Tensor) -> Tensor:
        # sum_{i != j} exp(-|u_i - v_j|^2 / (2 h^2)), via broadcasting to (m, m, d)
        du = u.reshape(m, 1, u.shape[1]) - v.reshape(1, m, v.shape[1])
        k = (du.square().sum(axis=2) * (-0.5 / bandwidth_sq)).exp()
        mask = Tensor(1.0 - np.eye(m, dtype=u.data.dtype))
        return (k * mask).sum()

    s = (kernel_offdiag_sum(mu_a, mu_a) + kernel_offdiag_sum(mu_b, mu_b)
         - kernel_offdiag_sum(mu_a, mu_b) * 2.0) * (1.0 / (m * (m - 1)))
    return maximum_const(s, 0.0)


def sim_distance(post_a: PosteriorPair, post_b: PosteriorPair, kind: str,
                 cfg: LossConfig | None = None) -> Tensor:
    """Batch-mean pair distance on the common features, by configured kind."""
    cfg = cfg or LossConfig()
    if kind == "modified_l2":
        return sim_modified_l2(post_a, post_b, cfg.sigma_floor)
    if kind == "l2":
        mu_a, mu_b = _pair2d(post_a.mu_c, post_b.mu_c)
        return (mu_a - mu_b).square().mean(axis=1).mean()
    if kind == "l1":
        mu_a, mu_b = _pair2d(post_a.mu_c, post_b.mu_c)
        return (mu_a - mu_b).abs().mean(axis=1).mean()
    if kind == "cosine":
        return _cosine(post_a, post_b, cfg.cosine_floor)
    if kind == "jeffreys":
        return _jeffreys(post_a, post_b)
    if kind == "mmd":
        return _mmd(post_a, post_b, cfg.mmd_bandwidth_sq)
    raise LossConfigError(f"unknown distance kind {kind!r}")


def activation_loss(mu_c_batch: Tensor, cfg: LossConfig) -> tuple:
    """(sparsity, invmax) on a batch of common means.

    sparsity drives the per-unit mean absolute activation toward sparsity_s;
    invmax wants at least one strongly active unit per sample.
    """
    mu = _as2d(mu_c_batch)
    if mu.shape[0] < 1:
        raise ShapeError("activation loss needs a non-empty batch")
    m = clamp(mu.abs().mean(axis=0), cfg.m_clamp_eps, 1.0 - cfg.m_clamp_eps)
    s = cfg.sparsity_s
    sparsity = -(m.log() * s + (1.0 - m).log() * (1.0 - s)).sum()
    per_max = maximum_const(mu.abs().max(axis=1), cfg.invmax_floor)
    invmax = (1.0 / per_max).mean()
    return sparsity, invmax


def cross_entropy(y: Tensor, t) -> Tensor:
    """Binary cross-entropy on probabilities, clamped to [1e-7, 1-1e-7]; batch mean."""
    tt = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=y.data.dtype))
    yc = clamp(y, 1e-7, 1.0 - 1e-7)
    return -(tt * yc.log() + (1.0 - tt) * (1.0 - yc).log()).mean()


def total_loss(x_a: Tensor, x_b: Tensor, xh_a: Tensor, xh_b: Tensor,
               post_a: PosteriorPair, post_b: PosteriorPair,
               cfg: LossConfig) -> LossBreakdown:
    """Twin objective: both branch VAE losses, pair similarity, pooled activation."""
    loss_a, parts_a = vae_loss(x_a, xh_a, post_a, cfg.kl_weight)
    loss_b, parts_b = vae_loss(x_b, xh_b, post_b, cfg.kl_weight)
    sim = sim_distance(post_a, post_b, cfg.distance_kind, cfg)
    pooled = concat([_as2d(post_a.mu_c), _as2d(post_b.mu_c)], axis=0)
    sparsity, invmax = activation_loss(pooled, cfg)
    act = sparsity + invmax if cfg.invmax_on else sparsity
    total = loss_a + loss_b + sim * cfg.lambda1 + act * cfg.lambda2
    inv_val = invmax.item() if cfg.invmax_on else 0.0
    return LossBreakdown(
        vae_A=loss_a.item(), vae_B=loss_b.item(),
        recon_A=parts_a["recon"], recon_B=parts_b["recon"],
        kl_c_A=parts_a["kl_c"], kl_c_B=parts_b["kl_c"],
        kl_s_A=parts_a["kl_s"], kl_s_B=parts_b["kl_s"],
        sim=sim.item(), act_sparsity=sparsity.item(), act_invmax=inv_val,
        total=total.item(), graph=total)
