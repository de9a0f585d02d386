"""Evaluation: supervised accuracy, unsupervised 2-means detection, ablations.

All entry points treat model parameters as read-only.  The unsupervised path
clusters scalar pair distances with an exact 1-D 2-means (sort plus a single
split scan), so there is no iterative-clustering convergence ambiguity.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, ModelParams, encode, reconstruct
from .train import (
    TrainConfig,
    classifier_logits,
    finetune,
    positive_probability,
    pretrain,
)

_TAG_ABLATION = 1010
_EVAL_BATCH = 256

ABLATION_AXES = ("distance_kind", "sparsity_s", "invmax_on")


class EvalError(ValueError):
    pass


class DegenerateClusteringError(EvalError):
    pass


@dataclass
class EvalResult:
    accuracy: float
    n_pos: int
    n_neg: int
    tp: int
    tn: int
    fp: int
    fn: int
    repeat_accuracies: list | None = None
    accuracy_mean: float | None = None
    accuracy_std: float | None = None

    def __post_init__(self):
        total = self.tp + self.tn + self.fp + self.fn
        if total != self.n_pos + self.n_neg:
            raise EvalError(f"confusion counts sum to {total}, dataset has "
                            f"{self.n_pos + self.n_neg} pairs")
        expected = (self.tp + self.tn) / total if total else 0.0
        if abs(self.accuracy - expected) > 1e-12:
            raise EvalError(f"accuracy {self.accuracy} inconsistent with counts")

    @classmethod
    def from_predictions(cls, predicted, labels) -> "EvalResult":
        predicted = np.asarray(predicted).astype(bool)
        labels = np.asarray(labels).astype(bool)
        if predicted.shape != labels.shape:
            raise EvalError(f"predictions {predicted.shape} vs labels {labels.shape}")
        tp = int(np.sum(predicted & labels))
        tn = int(np.sum(~predicted & ~labels))
        fp = int(np.sum(predicted & ~labels))
        fn = int(np.sum(~predicted & labels))
        n = len(labels)
        return cls(accuracy=(tp + tn) / n, n_pos=int(labels.sum()),
                   n_neg=n - int(labels.sum()), tp=tp, tn=tn, fp=fp, fn=fn)

    @classmethod
    def aggregate(cls, results: list) -> "EvalResult":
        """Pool confusion counts across repeats; mean/std over per-run accuracy."""
        if not results:
            raise EvalError("nothing to aggregate")
        accs = [r.accuracy for r in results]
        tp = sum(r.tp for r in results)
        tn = sum(r.tn for r in results)
        fp = sum(r.fp for r in results)
        fn = sum(r.fn for r in results)
        out = cls(accuracy=(tp + tn) / (tp + tn + fp + fn),
                  n_pos=sum(r.n_pos for r in results),
                  n_neg=sum(r.n_neg for r in results), tp=tp, tn=tn, fp=fp, fn=fn)
        out.repeat_accuracies = [float(a) for a in accs]
        out.accuracy_mean = float(np.mean(accs))
        out.accuracy_std = float(np.std(accs))
        return out

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "n_pos": self.n_pos, "n_neg": self.n_neg,
                "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "repeat_accuracies": self.repeat_accuracies,
                "accuracy_mean": self.accuracy_mean,
                "accuracy_std": self.accuracy_std}


def _common_means(images: np.ndarray, params: ModelParams,
                  cfg: ModelConfig) -> np.ndarray:
    """Encode a stack of single-channel images to mu_c, batched, no sampling."""
    out = []
    for lo in range(0, len(images), _EVAL_BATCH):
        batch = Tensor(np.ascontiguousarray(images[lo:lo + _EVAL_BATCH]))
        out.append(encode(batch, params, cfg).mu_c.data)
    return np.concatenate(out, axis=0)


def _posterior_arrays(images: np.ndarray, params: ModelParams,
                      cfg: ModelConfig) -> tuple:
    mus, sigmas = [], []
    for lo in range(0, len(images), _EVAL_BATCH):
        batch = Tensor(np.ascontiguousarray(images[lo:lo + _EVAL_BATCH]))
        post = encode(batch, params, cfg)
        mus.append(post.mu_c.data)
        sigmas.append(post.sigma_c.data)
    return np.concatenate(mus, axis=0), np.concatenate(sigmas, axis=0)


def classify_pair(x_a, x_b, params: ModelParams, psi, cfg: ModelConfig):
    """Probability that the pair contains the target event.

    Accepts one image pair (2-D arrays -> float) or stacked batches
    (3-D arrays -> 1-D array of probabilities).  Deterministic: uses the
    posterior means, never a sample.
    """
    a = np.asarray(x_a.data if isinstance(x_a, Tensor) else x_a)
    b = np.asarray(x_b.data if isinstance(x_b, Tensor) else x_b)
    single = a.ndim == 2
    mu_a = encode(Tensor(a), params, cfg).mu_c
    mu_b = encode(Tensor(b), params, cfg).mu_c
    prob = positive_probability(classifier_logits(mu_a, mu_b, psi)).data
    return float(prob[0]) if single else prob


def evaluate(test, params: ModelParams, psi, cfg: ModelConfig,
             threshold: float = 0.5) -> EvalResult:
    """Thresholded supervised accuracy with confusion counts."""
    if len(test) == 0:
        raise EvalError("cannot evaluate an empty dataset")
    probs = []
    for lo in range(0, len(test), _EVAL_BATCH):
        chunk = test.pairs[lo:lo + _EVAL_BATCH]
        probs.append(classify_pair(chunk[:, 0], chunk[:, 1], params, psi, cfg))
    probs = np.concatenate(probs)
    return EvalResult.from_predictions(probs >= threshold, test.labels)


def modified_l2_distances(test, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Per-pair scalar distance between common posteriors (no aggregation)."""
    n = len(test)
    flat = test.pairs.reshape(n * 2, 1, *test.pairs.shape[2:])
    mu, sigma = _posterior_arrays(flat, params, cfg)
    mu_a, mu_b = mu[0::2].astype(np.float64), mu[1::2].astype(np.float64)
    sg_a, sg_b = sigma[0::2].astype(np.float64), sigma[1::2].astype(np.float64)
    denom = np.maximum(sg_a * sg_b, 1e-12)
    return np.mean((mu_a - mu_b) ** 2 / denom, axis=1)


def two_means(values) -> tuple:
    """Exact 1-D 2-means: returns (cluster labels, (low centroid, high centroid)).

    Optimal 2-clusters of scalars are contiguous in sorted order, so scanning
    the n-1 split points and minimizing within-cluster SSE is exhaustive.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise EvalError(f"need a flat array of >= 2 values, got shape {v.shape}")
    if np.all(v == v[0]):
        raise DegenerateClusteringError(
            "all values identical: no meaningful 2-means split")
    order = np.argsort(v, kind="stable")
    s = v[order]
    n = len(s)
    pre = np.cumsum(s)
    pre2 = np.cumsum(s * s)
    k = np.arange(1, n)  # left cluster size at each candidate split
    left_sum, right_sum = pre[:-1], pre[-1] - pre[:-1]
    left_sse = pre2[:-1] - left_sum ** 2 / k
    right_sse = (pre2[-1] - pre2[:-1]) - right_sum ** 2 / (n - k)
    sse = left_sse + right_sse
    # first split whose SSE ties the minimum; the tolerance absorbs summation
    # rounding so exact mathematical ties break toward the smaller left cluster
    tol = 1e-9 * max(float(sse.min()), 1.0) + 1e-12
    best = int(np.flatnonzero(sse <= sse.min() + tol)[0])
    split = best + 1
    labels_sorted = np.zeros(n, dtype=np.uint8)
    labels_sorted[split:] = 1
    labels = np.empty(n, dtype=np.uint8)
    labels[order] = labels_sorted
    centroids = (float(left_sum[best] / split),
                 float(right_sum[best] / (n - split)))
    return labels, centroids


def detect_from_scores(scores, labels) -> EvalResult:
    """2-means on scalar scores; the larger-centroid cluster is the event class."""
    assignments, _ = two_means(scores)
    # cluster 1 holds the larger values by construction
    return EvalResult.from_predictions(assignments.astype(bool), labels)


def kmeans_detect(test, params: ModelParams, cfg: ModelConfig) -> EvalResult:
    """Unsupervised detection: 2-means over common-feature pair distances."""
    if len(test) == 0:
        raise EvalError("cannot evaluate an empty dataset")
    return detect_from_scores(modified_l2_distances(test, params, cfg), test.labels)


def vae_rec_score(test, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Reconstruction-error anomaly score per concatenated pair (deterministic)."""
    if cfg.in_channels != 2:
        raise EvalError("the reconstruction baseline uses 2-channel pair encodings; "
                        f"got in_channels={cfg.in_channels}")
    scores = []
    for lo in range(0, len(test), _EVAL_BATCH):
        x = np.ascontiguousarray(test.pairs[lo:lo + _EVAL_BATCH])
        x_hat = reconstruct(Tensor(x), params, cfg).data
        diff = (x.astype(np.float64) - x_hat.astype(np.float64)) ** 2
        scores.append(0.5 * diff.reshape(len(x), -1).sum(axis=1))
    return np.concatenate(scores)


def ablation_seed(base_seed: int, point_index: int, repeat: int) -> int:
    """Stable per-(grid point, repeat) seed for independent pipeline runs."""
    ss = np.random.SeedSequence([base_seed, _TAG_ABLATION, point_index, repeat])
    return int(ss.generate_state(1)[0])


@dataclass
class AblationTable:
    axis: str
    rows: list = field(default_factory=list)  # (setting, mean, std)
    runs: list = field(default_factory=list)  # (setting, repeat, accuracy)

    def to_json(self) -> dict:
        return {"axis": self.axis,
                "rows": [{"setting": s, "mean": m, "std": d}
                         for s, m, d in self.rows],
                "runs": [{"setting": s, "repeat": r, "accuracy": a}
                         for s, r, a in self.runs]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["setting", "repeat", "accuracy"])
            for setting, repeat, acc in self.runs:
                w.writerow([setting, repeat, acc])


def _apply_axis(cfg: TrainConfig, axis: str, setting) -> TrainConfig:
    loss = cfg.loss
    if axis == "distance_kind":
        loss = type(loss)(**{**loss.to_json(), "distance_kind": setting})
    elif axis == "sparsity_s":
        loss = type(loss)(**{**loss.to_json(), "sparsity_s": float(setting)})
    elif axis == "invmax_on":
        loss = type(loss)(**{**loss.to_json(), "invmax_on": bool(setting)})
    else:
        raise EvalError(f"unknown ablation axis {axis!r}; "
                        f"expected one of {ABLATION_AXES}")
    d = cfg.to_json()
    d["loss"] = loss.to_json()
    return TrainConfig.from_json(d)


def run_ablation(axis: str, grid, neg_pairs, labeled, test,
                 model_cfg: ModelConfig, pretrain_cfg: TrainConfig,
                 finetune_cfg: TrainConfig, repeats: int = 3,
                 out_dir=None) -> AblationTable:
    """Grid of full pipeline runs (pretrain, finetune, evaluate) per setting.

    Each (grid point, repeat) gets a fresh derived seed; settings that alter
    the loss apply during pretraining, where the similarity and activation
    terms live.  Writes ablation.csv and ablation.json when out_dir is given.
    """
    if axis not in ABLATION_AXES:
        raise EvalError(f"unknown ablation axis {axis!r}; "
                        f"expected one of {ABLATION_AXES}")
    grid = list(grid)
    if not grid:
        raise EvalError("empty ablation grid")
    if repeats < 1:
        raise EvalError("repeats must be >= 1")
    table = AblationTable(axis=axis)
    for point_index, setting in enumerate(grid):
        accs = []
        for repeat in range(repeats):
            seed = ablation_seed(pretrain_cfg.seed, point_index, repeat)
            p_cfg = _apply_axis(pretrain_cfg, axis, setting)
            p_cfg = TrainConfig.from_json({**p_cfg.to_json(), "seed": seed})
            f_cfg = TrainConfig.from_json({**finetune_cfg.to_json(), "seed": seed})
            params, _ = pretrain(neg_pairs, model_cfg, p_cfg)
            tuned, psi, _ = finetune(params, labeled, model_cfg, f_cfg)
            acc = evaluate(test, tuned, psi, model_cfg).accuracy
            accs.append(acc)
            table.runs.append((setting, repeat, float(acc)))
        table.rows.append((setting, float(np.mean(accs)), float(np.std(accs))))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "ablation.csv")
        (out / "ablation.json").write_text(json.dumps(table.to_json(), indent=2),
                                           encoding="utf-8")
    return table