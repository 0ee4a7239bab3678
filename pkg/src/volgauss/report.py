"""Figure rendering for CLI reports. Uses the Agg backend only; every
function writes a file and closes the figure."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _show(ax, img, title, gray=False):
    img = np.asarray(img)
    if img.ndim == 2 or gray:
        im = ax.imshow(img if img.ndim == 2 else img.mean(axis=2),
                       cmap="magma")
        plt.colorbar(im, ax=ax, fraction=0.046)
    else:
        ax.imshow(np.clip(img, 0.0, 1.0))
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def image_grid(path, images, titles=None, ncols=None):
    n = len(images)
    ncols = ncols or min(n, 4)
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 3.2 * nrows),
                             squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        if i < n:
            _show(ax, images[i], titles[i] if titles else f"image {i}")
        else:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def compare_figure(path, renders: dict, reference_key):
    """One row of renders, one row of absolute differences vs the reference."""
    keys = list(renders)
    ref = np.asarray(renders[reference_key])
    fig, axes = plt.subplots(2, len(keys), figsize=(3.2 * len(keys), 6.4),
                             squeeze=False)
    for j, key in enumerate(keys):
        _show(axes[0][j], renders[key], key)
        diff = np.abs(np.asarray(renders[key]) - ref).max(axis=-1)
        _show(axes[1][j], diff, f"|{key} - {reference_key}|")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def loss_curves(path, curves: dict, ylabel="loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in curves.items():
        ax.plot(values, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if all(np.all(np.asarray(v) > 0) for v in curves.values() if len(v)):
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def slice_panel(path, volume, reference=None, n_slices=4):
    """Central axial slices of a volume, optionally against a reference row."""
    volume = np.asarray(volume)
    idx = np.linspace(0, volume.shape[2] - 1, n_slices + 2)[1:-1].astype(int)
    rows = 1 if reference is None else 2
    fig, axes = plt.subplots(rows, n_slices, figsize=(3.0 * n_slices, 3.0 * rows),
                             squeeze=False)
    vmax = float(max(volume.max(),
                     reference.max() if reference is not None else 0.0, 1e-9))
    for j, k in enumerate(idx):
        im = axes[0][j].imshow(volume[:, :, k], cmap="magma", vmin=0, vmax=vmax)
        axes[0][j].set_title(f"recon z={k}", fontsize=9)
        axes[0][j].axis("off")
        plt.colorbar(im, ax=axes[0][j], fraction=0.046)
        if reference is not None:
            im = axes[1][j].imshow(np.asarray(reference)[:, :, k], cmap="magma",
                                   vmin=0, vmax=vmax)
            axes[1][j].set_title(f"reference z={k}", fontsize=9)
            axes[1][j].axis("off")
            plt.colorbar(im, ax=axes[1][j], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
