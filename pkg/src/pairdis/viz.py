"""Visualization exports: interpolation grids, PCA projections, run figures.

Image grids are written as 8-bit grayscale PNGs (values round(255 * pixel));
a PGM fallback keeps the export working without Pillow.  Figures render
through the Agg backend so everything works headless.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .autodiff import Tensor  # noqa: E402
from .model import ModelConfig, ModelParams, decode, encode  # noqa: E402


class VizError(ValueError):
    pass


# ------------------------------------------------------------- image writing

def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to rounded 8-bit grayscale; clips out-of-range pixels."""
    a = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def save_grayscale(path, image: np.ndarray) -> Path:
    """Write a 2-D array as PNG via Pillow, or PGM if Pillow is unavailable."""
    a = to_uint8(image)
    if a.ndim != 2:
        raise VizError(f"expected a 2-D image, got shape {a.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        from PIL import Image
    except ImportError:
        path = path.with_suffix(".pgm")
        header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + a.tobytes())
        return path
    Image.fromarray(a, mode="L").save(path)
    return path


# ------------------------------------------------------------- interpolation

def interpolate_grid(x_a, x_b, which: str, steps: int, params: ModelParams,
                     cfg: ModelConfig) -> np.ndarray:
    """Row of decodes sweeping one feature from image A's mean to image B's.

    The non-interpolated feature stays at image A's mean and epsilon is 0
    throughout, so the alpha=0 column is exactly the deterministic
    reconstruction of A.  Returns (H, steps * W) in [0, 1].
    """
    if which not in ("common", "specific"):
        raise VizError(f"which must be 'common' or 'specific', got {which!r}")
    if steps < 2:
        raise VizError(f"steps must be >= 2, got {steps}")
    post_a = encode(Tensor(np.asarray(x_a)), params, cfg)
    post_b = encode(Tensor(np.asarray(x_b)), params, cfg)
    mu_c_a, mu_s_a = post_a.mu_c.data, post_a.mu_s.data
    mu_c_b, mu_s_b = post_b.mu_c.data, post_b.mu_s.data
    moving_a, moving_b = ((mu_c_a, mu_c_b) if which == "common"
                          else (mu_s_a, mu_s_b))
    columns = []
    for i in range(steps):
        alpha = i / (steps - 1)
        if i == 0:  # exact endpoints: no interpolation arithmetic
            z = moving_a.copy()
        elif i == steps - 1:
            z = moving_b.copy()
        else:
            z = (1.0 - alpha) * moving_a + alpha * moving_b
        z_c, z_s = (z, mu_s_a.copy()) if which == "common" else (mu_c_a.copy(), z)
        img = decode(Tensor(z_c), Tensor(z_s), params, cfg).data
        columns.append(img[0, 0])
    return np.concatenate(columns, axis=1)


# ---------------------------------------------------------------------- PCA

def pca_2d(features: np.ndarray) -> tuple:
    """Project rows to the top-2 principal axes via covariance eigendecomposition.

    Returns (coords (N, 2), eigenvalues (2,), components (D, 2)).  Component
    signs are fixed so each axis's largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise VizError(f"PCA needs at least 3 samples of flat features, "
                       f"got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = (centered.T @ centered) / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    comps = eigvecs[:, order]
    if comps.shape[1] < 2:  # 1-D feature space: pad a zero axis
        comps = np.concatenate([comps, np.zeros_like(comps)], axis=1)
        eigvals = np.array([eigvals[order[0]], 0.0])
    else:
        eigvals = eigvals[order]
    for j in range(2):
        k = int(np.argmax(np.abs(comps[:, j])))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps, eigvals, comps


def nearest_centroid_accuracy(coords: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of classifying each point by its nearest class centroid."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise VizError("the probe needs at least two classes")
    centroids = np.stack([coords[labels == c].mean(axis=0) for c in classes])
    d = ((coords[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    predicted = classes[np.argmin(d, axis=1)]
    return float((predicted == labels).mean())


def project_features(images: np.ndarray, classes: np.ndarray, params: ModelParams,
                     cfg: ModelConfig, out_dir) -> dict:
    """Encode images, export raw features and separate 2-D PCA projections.

    Writes features.csv (id, class, mu_c..., mu_s...), pca_common.csv and
    pca_specific.csv (id, class, pc1, pc2).  Returns coordinate arrays, probe
    accuracies, and the artifact paths.
    """
    images = np.asarray(images)
    classes = np.asarray(classes)
    if len(images) < 3:
        raise VizError(f"projection needs at least 3 images, got {len(images)}")
    if len(images) != len(classes):
        raise VizError(f"{len(images)} images vs {len(classes)} class labels")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    mu_c_rows, mu_s_rows = [], []
    batch = 256
    for lo in range(0, len(images), batch):
        post = encode(Tensor(np.ascontiguousarray(images[lo:lo + batch])),
                      params, cfg)
        mu_c_rows.append(post.mu_c.data)
        mu_s_rows.append(post.mu_s.data)
    mu_c = np.concatenate(mu_c_rows).astype(np.float64)
    mu_s = np.concatenate(mu_s_rows).astype(np.float64)

    features_csv = out / "features.csv"
    with open(features_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "class"]
                   + [f"mu_c_{i}" for i in range(mu_c.shape[1])]
                   + [f"mu_s_{i}" for i in range(mu_s.shape[1])])
        for i in range(len(images)):
            w.writerow([i, int(classes[i])]
                       + [repr(v) for v in mu_c[i]] + [repr(v) for v in mu_s[i]])

    coords = {}
    paths = {"features": features_csv}
    for tag, feats in (("common", mu_c), ("specific", mu_s)):
        xy, _, _ = pca_2d(feats)
        coords[tag] = xy
        p = out / f"pca_{tag}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "class", "pc1", "pc2"])
            for i in range(len(xy)):
                w.writerow([i, int(classes[i]), repr(xy[i, 0]), repr(xy[i, 1])])
        paths[f"pca_{tag}"] = p

    return {"coords_common": coords["common"], "coords_specific": coords["specific"],
            "probe_common": nearest_centroid_accuracy(coords["common"], classes),
            "probe_specific": nearest_centroid_accuracy(coords["specific"], classes),
            "paths": paths}


# ------------------------------------------------------------------ figures

def training_curve_figure(epoch_rows: list, path, title: str = "training loss") -> Path:
    """Line plot of per-epoch mean loss terms from a run report."""
    if not epoch_rows:
        raise VizError("no epochs to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs = [r.get("epoch", i) for i, r in enumerate(epoch_rows)]
    fig, ax = plt.subplots(figsize=(6, 4))
    skip = {"epoch", "kl_weight", "total"}
    if "total" in epoch_rows[0]:
        ax.plot(xs, [r["total"] for r in epoch_rows], label="total", linewidth=2)
    for key in epoch_rows[0]:
        if key in skip or not isinstance(epoch_rows[0][key], (int, float)):
            continue
        ax.plot(xs, [r[key] for r in epoch_rows], label=key, alpha=0.7)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def ablation_figure(table, path) -> Path:
    """Mean accuracy with std error bars per grid setting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    settings = [str(s) for s, _, _ in table.rows]
    means = [m for _, m, _ in table.rows]
    stds = [d for _, _, d in table.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(settings)), means, yerr=stds, capsize=4, color="#4878a8")
    ax.set_xticks(range(len(settings)))
    ax.set_xticklabels(settings, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.set_title(f"ablation: {table.axis}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def scatter_figure(coords: np.ndarray, labels: np.ndarray, path,
                   title: str = "") -> Path:
    """2-D feature scatter colored by class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coords = np.asarray(coords)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 5))
    for c in np.unique(labels):
        m = labels == c
        ax.scatter(coords[m, 0], coords[m, 1], s=8, alpha=0.7, label=str(c))
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    ax.legend(fontsize=7, markerscale=1.5)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path