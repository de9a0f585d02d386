"""Two training phases over image pairs.

Phase one learns the twin representation from negative pairs only; phase two
balances the labeled set by undersampling and fits a small classifier head on
the deterministic common means, nudging the encoder at a reduced rate while
the decoder stays frozen.  A third entry point trains a plain VAE on
concatenated pairs for the reconstruction-error detection baseline.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, NonFiniteError, Tensor, concat, dense, sigmoid
from .losses import LossConfig, cross_entropy, total_loss, vae_loss
from .model import ModelConfig, ModelParams, decode, encode, reparameterize

_TAG_SHUFFLE = 606
_TAG_NOISE = 707
_TAG_CLASSIFIER = 808
_TAG_FINETUNE = 909

CLASSIFIER_HIDDEN = (100, 100)


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 100
    lr: float = 1e-3
    weight_decay: float = 5e-4
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    encoder_lr_scale_finetune: float = 0.1
    anneal_epochs: int | None = None  # None: anneal over all configured epochs
    kl_anneal: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainError("epochs must be >= 0")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.loss.distance_kind == "mmd" and self.batch_size < 2:
            raise TrainError("mmd distance needs batch_size >= 2")
        if self.lr <= 0 or self.weight_decay < 0:
            raise TrainError("lr must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.encoder_lr_scale_finetune <= 1.0:
            raise TrainError("encoder_lr_scale_finetune must lie in [0, 1]")
        if self.anneal_epochs is not None and self.anneal_epochs < 0:
            raise TrainError("anneal_epochs must be >= 0")

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "weight_decay": self.weight_decay,
                "loss": self.loss.to_json(), "seed": self.seed,
                "encoder_lr_scale_finetune": self.encoder_lr_scale_finetune,
                "anneal_epochs": self.anneal_epochs, "kl_anneal": self.kl_anneal}

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)


@dataclass
class ClassifierParams:
    """Dense head on concatenated common means: 2*M_c -> 100 -> 100 -> 2."""
    tensors: dict = field(default_factory=dict)

    def all(self) -> list:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def as_arrays(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        for n, t in self.tensors.items():
            a = np.asarray(arrays[n], dtype=t.data.dtype)
            if a.shape != t.data.shape:
                raise TrainError(f"{n}: stored shape {a.shape} vs model {t.data.shape}")
            t.data = a.copy()

    def copy(self) -> "ClassifierParams":
        out = ClassifierParams()
        for n, t in self.tensors.items():
            out.tensors[n] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
        return out


@dataclass
class RunReport:
    phase: str
    epochs: list = field(default_factory=list)  # one dict of epoch-mean terms each
    wall_time_s: float = 0.0
    final_metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    checkpoint_path: str | None = None
    halted: str | None = None

    def to_json(self) -> dict:
        return {"phase": self.phase, "epochs": self.epochs,
                "wall_time_s": self.wall_time_s, "final_metrics": self.final_metrics,
                "config": self.config, "seeds": self.seeds,
                "checkpoint_path": self.checkpoint_path, "halted": self.halted}


def kl_anneal_weight(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> 1 across the annealing window; 1.0 when annealing is off."""
    if epoch < 0:
        raise TrainError("epoch must be >= 0")
    if not cfg.kl_anneal:
        return 1.0
    span = cfg.anneal_epochs if cfg.anneal_epochs is not None else cfg.epochs
    if span <= 0:
        return 1.0
    return min(epoch / span, 1.0)


def _derived_rng(seed: int, tag: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one is dropped."""
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo:lo + batch_size]
        if len(idx) < 2:
            return
        yield idx


class _StepLog:
    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _epoch_mean(rows: list) -> dict:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def pretrain(neg_pairs, model_cfg: ModelConfig, train_cfg: TrainConfig,
             log_path=None) -> tuple:
    """Fit the twin representation on negative pairs; returns (params, report).

    The phase is unsupervised by construction, so any positive pair in the
    dataset is a contract violation, not data to be skipped.
    """
    n_pos = int(np.asarray(neg_pairs.labels).sum())
    if n_pos:
        raise TrainError(
            f"pretraining is unsupervised: dataset contains {n_pos} positive pairs")

    from .model import init_params
    params = init_params(model_cfg, train_cfg.seed)
    report = RunReport(phase="pretrain", config={
        "model": model_cfg.to_json(), "train": train_cfg.to_json()})
    report.seeds = {"seed": train_cfg.seed,
                    "streams": {"shuffle": _TAG_SHUFFLE, "noise": _TAG_NOISE}}
    if train_cfg.epochs == 0:
        report.final_metrics = {"steps": 0}
        return params, report

    opt = Adam([{"params": params.all(), "lr": train_cfg.lr,
                 "weight_decay": train_cfg.weight_decay}])
    dt = params.tensors["enc.conv1.w"].data.dtype
    mc, ms = model_cfg.latent_common, model_cfg.latent_specific
    log = _StepLog(log_path)
    start = time.perf_counter()
    steps = 0
    try:
        for epoch in range(train_cfg.epochs):
            anneal = kl_anneal_weight(epoch, train_cfg)
            loss_cfg = train_cfg.loss.with_kl_weight(anneal * train_cfg.loss.kl_weight)
            shuffle = _derived_rng(train_cfg.seed, _TAG_SHUFFLE, epoch)
            noise = _derived_rng(train_cfg.seed, _TAG_NOISE, epoch)
            rows = []
            for step, idx in enumerate(_batches(len(neg_pairs), train_cfg.batch_size,
                                                shuffle)):
                x_a = Tensor(neg_pairs.pairs[idx, 0:1])  # pair slot -> channel axis
                x_b = Tensor(neg_pairs.pairs[idx, 1:2])
                b = len(idx)
                try:
                    post_a = encode(x_a, params, model_cfg)
                    post_b = encode(x_b, params, model_cfg)
                    za = reparameterize(post_a,
                                        noise.standard_normal((b, mc), dtype=dt),
                                        noise.standard_normal((b, ms), dtype=dt))
                    zb = reparameterize(post_b,
                                        noise.standard_normal((b, mc), dtype=dt),
                                        noise.standard_normal((b, ms), dtype=dt))
                    xh_a = decode(za[0], za[1], params, model_cfg)
                    xh_b = decode(zb[0], zb[1], params, model_cfg)
                    bd = total_loss(x_a, x_b, xh_a, xh_b, post_a, post_b, loss_cfg)
                    if not np.isfinite(bd.total):
                        raise NonFiniteError(f"total loss = {bd.total}")
                    bd.graph.backward()
                except NonFiniteError as err:
                    report.halted = (f"non-finite value at epoch {epoch} "
                                     f"step {step}: {err}")
                    report.final_metrics["poisoned"] = True
                    break
                opt.step()
                opt.zero_grad()
                steps += 1
                row = bd.to_json()
                rows.append(row)
                log.write({"phase": "pretrain", "epoch": epoch, "step": step,
                           "kl_weight": loss_cfg.kl_weight, **row})
            if rows:
                report.epochs.append({"epoch": epoch, "kl_weight": loss_cfg.kl_weight,
                                      **_epoch_mean(rows)})
            if report.halted:
                break
    finally:
        log.close()
    report.wall_time_s = time.perf_counter() - start
    report.final_metrics.setdefault("steps", steps)
    if report.epochs:
        report.final_metrics["first_epoch_total"] = report.epochs[0]["total"]
        report.final_metrics["last_epoch_total"] = report.epochs[-1]["total"]
    return params, report


def init_classifier(latent_common: int, seed: int, dtype: str = "float32") -> ClassifierParams:
    """Fan-in-scaled uniform weights, zero biases, matching the encoder init style."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_CLASSIFIER]))
    dt = np.float32 if dtype == "float32" else np.float64
    dims = (2 * latent_common,) + CLASSIFIER_HIDDEN + (2,)
    psi = ClassifierParams()
    for i in range(len(dims) - 1):
        a = 1.0 / np.sqrt(dims[i])
        name = f"cls.fc{i + 1}"
        psi.tensors[f"{name}.w"] = Tensor(
            rng.uniform(-a, a, size=(dims[i], dims[i + 1])).astype(dt),
            requires_grad=True, name=f"{name}.w")
        psi.tensors[f"{name}.b"] = Tensor(np.zeros(dims[i + 1], dtype=dt),
                                          requires_grad=True, name=f"{name}.b")
    return psi


def classifier_logits(mu_a: Tensor, mu_b: Tensor, psi: ClassifierParams) -> Tensor:
    """Two-class logits from the ordered concatenation of common means."""
    t = psi.tensors
    h = concat([mu_a, mu_b], axis=1)
    h = dense(h, t["cls.fc1.w"], t["cls.fc1.b"]).relu()
    h = dense(h, t["cls.fc2.w"], t["cls.fc2.b"]).relu()
    return dense(h, t["cls.fc3.w"], t["cls.fc3.b"])


def positive_probability(logits: Tensor) -> Tensor:
    """Softmax over two logits collapses to a sigmoid of their difference."""
    b = logits.shape[0]
    flip = Tensor(np.array([[-1.0], [1.0]], dtype=logits.data.dtype))
    return sigmoid((logits @ flip).reshape(b))


def finetune(params: ModelParams, labeled, model_cfg: ModelConfig,
             train_cfg: TrainConfig, log_path=None) -> tuple:
    """Balanced fine-tuning pass; returns (params, classifier, report).

    The input params are copied, never mutated.  Only the classifier (full lr)
    and the encoder (lr scaled down) are optimized; decoder tensors are not
    registered with the optimizer at all.
    """
    from .data import undersample_negatives

    n_pos, n_neg = labeled.counts
    if n_pos < 1 or n_neg < 1:
        raise TrainError(f"finetuning needs both classes, got {n_pos} positive "
                         f"and {n_neg} negative pairs")
    balanced = undersample_negatives(labeled, seed=train_cfg.seed)

    params = params.copy()
    psi = init_classifier(model_cfg.latent_common, train_cfg.seed, model_cfg.dtype)
    groups = [{"params": psi.all(), "lr": train_cfg.lr,
               "weight_decay": train_cfg.weight_decay}]
    enc_lr = train_cfg.lr * train_cfg.encoder_lr_scale_finetune
    if enc_lr > 0:
        groups.append({"params": params.encoder(), "lr": enc_lr,
                       "weight_decay": train_cfg.weight_decay})
    opt = Adam(groups)

    report = RunReport(phase="finetune", config={
        "model": model_cfg.to_json(), "train": train_cfg.to_json()})
    report.seeds = {"seed": train_cfg.seed,
                    "streams": {"shuffle": _TAG_FINETUNE,
                                "classifier": _TAG_CLASSIFIER}}
    log = _StepLog(log_path)
    start = time.perf_counter()
    steps = 0
    try:
        for epoch in range(train_cfg.epochs):
            shuffle = _derived_rng(train_cfg.seed, _TAG_FINETUNE, epoch)
            rows = []
            for step, idx in enumerate(_batches(len(balanced), train_cfg.batch_size,
                                                shuffle)):
                x_a = Tensor(balanced.pairs[idx, 0])
                x_b = Tensor(balanced.pairs[idx, 1])
                targets = balanced.labels[idx].astype(np.float64)
                try:
                    mu_a = encode(x_a, params, model_cfg).mu_c
                    mu_b = encode(x_b, params, model_cfg).mu_c
                    logits = classifier_logits(mu_a, mu_b, psi)
                    prob = positive_probability(logits)
                    loss = cross_entropy(prob, targets)
                    if not np.isfinite(loss.item()):
                        raise NonFiniteError(f"cross-entropy = {loss.item()}")
                    loss.backward()
                except NonFiniteError as err:
                    report.halted = (f"non-finite value at epoch {epoch} "
                                     f"step {step}: {err}")
                    report.final_metrics["poisoned"] = True
                    break
                opt.step()
                opt.zero_grad()
                steps += 1
                acc = float(((prob.data >= 0.5) == (targets >= 0.5)).mean())
                row = {"cross_entropy": loss.item(), "accuracy": acc}
                rows.append(row)
                log.write({"phase": "finetune", "epoch": epoch, "step": step, **row})
            if rows:
                report.epochs.append({"epoch": epoch, **_epoch_mean(rows)})
            if report.halted:
                break
    finally:
        log.close()
    report.wall_time_s = time.perf_counter() - start
    report.final_metrics.setdefault("steps", steps)
    report.final_metrics["balanced_counts"] = list(balanced.counts)
    if report.epochs:
        report.final_metrics["first_epoch_ce"] = report.epochs[0]["cross_entropy"]
        report.final_metrics["last_epoch_ce"] = report.epochs[-1]["cross_entropy"]
        report.final_metrics["last_epoch_accuracy"] = report.epochs[-1]["accuracy"]
    return params, psi, report


def train_recon_vae(neg_pairs, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    log_path=None) -> tuple:
    """Plain VAE over concatenated pairs (two input channels); baseline scorer."""
    if model_cfg.in_channels != 2:
        raise TrainError("the reconstruction baseline encodes pairs as 2-channel "
                         f"images; got in_channels={model_cfg.in_channels}")
    n_pos = int(np.asarray(neg_pairs.labels).sum())
    if n_pos:
        raise TrainError(
            f"baseline training is unsupervised: {n_pos} positive pairs present")

    from .model import init_params
    params = init_params(model_cfg, train_cfg.seed)
    report = RunReport(phase="recon_vae", config={
        "model": model_cfg.to_json(), "train": train_cfg.to_json()})
    report.seeds = {"seed": train_cfg.seed,
                    "streams": {"shuffle": _TAG_SHUFFLE, "noise": _TAG_NOISE}}
    if train_cfg.epochs == 0:
        report.final_metrics = {"steps": 0}
        return params, report

    opt = Adam([{"params": params.all(), "lr": train_cfg.lr,
                 "weight_decay": train_cfg.weight_decay}])
    dt = params.tensors["enc.conv1.w"].data.dtype
    mc, ms = model_cfg.latent_common, model_cfg.latent_specific
    log = _StepLog(log_path)
    start = time.perf_counter()
    steps = 0
    try:
        for epoch in range(train_cfg.epochs):
            anneal = kl_anneal_weight(epoch, train_cfg)
            kl_w = anneal * train_cfg.loss.kl_weight
            shuffle = _derived_rng(train_cfg.seed, _TAG_SHUFFLE, epoch)
            noise = _derived_rng(train_cfg.seed, _TAG_NOISE, epoch)
            rows = []
            for step, idx in enumerate(_batches(len(neg_pairs), train_cfg.batch_size,
                                                shuffle)):
                x = Tensor(neg_pairs.pairs[idx])  # (b, 2, H, W)
                b = len(idx)
                try:
                    post = encode(x, params, model_cfg)
                    z_c, z_s = reparameterize(
                        post, noise.standard_normal((b, mc), dtype=dt),
                        noise.standard_normal((b, ms), dtype=dt))
                    x_hat = decode(z_c, z_s, params, model_cfg)
                    loss, parts = vae_loss(x, x_hat, post, kl_w)
                    if not np.isfinite(loss.item()):
                        raise NonFiniteError(f"loss = {loss.item()}")
                    loss.backward()
                except NonFiniteError as err:
                    report.halted = (f"non-finite value at epoch {epoch} "
                                     f"step {step}: {err}")
                    report.final_metrics["poisoned"] = True
                    break
                opt.step()
                opt.zero_grad()
                steps += 1
                row = {"total": loss.item(), **parts}
                rows.append(row)
                log.write({"phase": "recon_vae", "epoch": epoch, "step": step,
                           "kl_weight": kl_w, **row})
            if rows:
                report.epochs.append({"epoch": epoch, "kl_weight": kl_w,
                                      **_epoch_mean(rows)})
            if report.halted:
                break
    finally:
        log.close()
    report.wall_time_s = time.perf_counter() - start
    report.final_metrics.setdefault("steps", steps)
    if report.epochs:
        report.final_metrics["first_epoch_total"] = report.epochs[0]["total"]
        report.final_metrics["last_epoch_total"] = report.epochs[-1]["total"]
    return params, report