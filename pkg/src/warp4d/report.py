"""Matplotlib figures written by the CLI (Agg backend, fixed metadata)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_figure(history, path):
    h = np.asarray(history, dtype=np.float64).reshape(-1, 4)
    fig, ax = plt.subplots(figsize=(6, 3.5), layout="constrained")
    if len(h):
        ax.semilogy(h[:, 0], np.maximum(h[:, 1], 1e-12), lw=0.8, label="fm")
        if np.any(h[:, 2] > 0):
            ax.semilogy(h[:, 0], np.maximum(h[:, 2], 1e-12), lw=0.8, label="aux")
        ax2 = ax.twinx()
        ax2.plot(h[:, 0], h[:, 3], color="0.4", ls="--", lw=1.0)
        ax2.set_ylabel("alpha")
        ax2.set_ylim(-0.05, 1.05)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", frameon=False)
    _save(fig, path)


def frame_grid(rows, columns, path, row_labels=None):
    """``rows`` is a list of lists of images (RGB in [0, 1] or 2-D maps in [0, 1])."""
    n_r, n_c = len(rows), len(columns)
    fig, axes = plt.subplots(n_r, n_c, figsize=(1.8 * n_c, 1.6 * n_r), squeeze=False, layout="constrained")
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            ax = axes[i, j]
            img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(columns[j], fontsize=8)
        if row_labels:
            axes[i, 0].set_ylabel(row_labels[i], fontsize=8)
    _save(fig, path)


def metrics_figure(records, path, keys=("psnr", "ssim", "region_mse")):
    keys = [k for k in keys if k in records[0]]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3), squeeze=False, layout="constrained")
    for ax, k in zip(axes[0], keys):
        v = np.array([r[k] for r in records], dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size:
            ax.hist(v, bins=min(20, max(3, v.size)), color="0.35")
            ax.axvline(v.mean(), color="C3", lw=1.2)
        ax.set_title(f"{k} (mean {v.mean():.4g})" if v.size else k, fontsize=9)
    _save(fig, path)


def toy_figure(samples, spec, path):
    samples = np.asarray(samples)
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2), layout="constrained")
    a.hist2d(samples[:, 0], samples[:, 1], bins=80, cmap="Greys")
    a.scatter(*np.asarray(spec.means).T, marker="x", color="C3")
    a.set_xlabel("x")
    a.set_ylabel("y")
    comp = spec.assign(samples)
    got = np.bincount(comp, minlength=len(spec.weights)) / len(samples)
    idx = np.arange(len(spec.weights))
    b.bar(idx - 0.2, spec.weights, width=0.4, label="target", color="0.6")
    b.bar(idx + 0.2, got, width=0.4, label="sampled", color="C0")
    b.set_xticks(idx)
    b.set_xlabel("component")
    b.set_ylabel("weight")
    b.legend(frameon=False)
    _save(fig, path)
