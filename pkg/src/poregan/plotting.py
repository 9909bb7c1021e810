"""Static report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DEPTH_COLORS = ["tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple", "tab:brown"]
DEPTH_MARKERS = ["o", "s", "^", "D", "v", "P"]
REAL_COLOR = "tab:blue"
GEN_COLOR = "tab:green"


def _color(d):
    return DEPTH_COLORS[d % len(DEPTH_COLORS)]


def _save(fig, path, metadata=None):
    """Write ``fig`` as PNG via a temporary file; ``metadata`` goes into PNG text chunks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, dpi=120, format="png",
                metadata={str(k): str(v) for k, v in (metadata or {}).items()})
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_training(log, path, metadata=None):
    """Loss curves (left) and per-depth probe porosity against its target (right)."""
    rows = log.rows if hasattr(log, "rows") else log
    epochs = [r["epoch"] for r in rows]
    probe_keys = sorted(k for k in rows[0] if k.startswith("probe_porosity_")) if rows else []
    fig, axes = plt.subplots(1, 2 if probe_keys else 1, figsize=(11 if probe_keys else 6, 4),
                             squeeze=False)
    ax = axes[0, 0]
    ax.plot(epochs, [r["loss_g"] for r in rows], color="tab:red", label="generator")
    ax.plot(epochs, [r["loss_d"] for r in rows], color="tab:blue", label="discriminator")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    if probe_keys:
        ax = axes[0, 1]
        for k in probe_keys:
            d = int(k.rsplit("_", 1)[1])
            ax.plot(epochs, [r[k] for r in rows], color=_color(d), label=f"depth {d}")
            ax.axhline(rows[0][f"probe_target_{d}"], color=_color(d), ls="--", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("generated porosity")
        ax.legend(frameon=False)
    return _save(fig, path, metadata)


def plot_porosity_control(report, path, metadata=None):
    t, o, d = np.array(report.targets), np.array(report.observed), np.array(report.depths)
    fig, ax = plt.subplots(figsize=(5, 5))
    for k in sorted(set(d.tolist())):
        sel = d == k
        ax.scatter(t[sel], o[sel], s=16, color=_color(k),
                   marker=DEPTH_MARKERS[k % len(DEPTH_MARKERS)], label=f"depth {k}")
    lo, hi = min(t.min(), o.min()), max(t.max(), o.max())
    ax.plot([lo, hi], [lo, hi], color="k", lw=0.8, ls="--")
    ax.set_xlabel("target porosity")
    ax.set_ylabel("generated porosity")
    ax.set_title(f"R$^2$ = {report.r2:.4f}")
    ax.legend(frameon=False)
    ax.set_box_aspect(1)
    return _save(fig, path, metadata)


def plot_rev(curve, path, threshold=None, chosen=None, metadata=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    for d, sig in sorted(curve.sigma.items()):
        ax.plot(curve.sizes, sig, marker="o", ms=3, color=_color(d), label=f"depth {d}")
    if threshold is not None:
        ax.axhline(threshold, color="k", ls=":", lw=0.8)
    if chosen is not None:
        ax.axvline(chosen, color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("sub-image size (px)")
    ax.set_ylabel("porosity std")
    ax.legend(frameon=False)
    return _save(fig, path, metadata)


def plot_class_counts(before, after, path, metadata=None):
    """Heatmaps of (depth, class) counts before and after balancing."""
    keys = set(before) | set(after)
    nd = max(k[0] for k in keys) + 1
    nc = max(k[1] for k in keys) + 1
    fig, axes = plt.subplots(1, 2, figsize=(11, 1.2 + 0.6 * nd))
    for ax, counts, title in ((axes[0], before, "initial"), (axes[1], after, "balanced")):
        grid = np.zeros((nd, nc), dtype=int)
        for (d, c), n in counts.items():
            grid[d, c] = n
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        for (i, j), n in np.ndenumerate(grid):
            ax.text(j, i, str(n), ha="center", va="center", fontsize=7, color="w")
        ax.set_xlabel("porosity class")
        ax.set_ylabel("depth")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.04)
    return _save(fig, path, metadata)


def plot_morphology_panels(real, generated, path, labels=None, metadata=None):
    """Box plots of each descriptor for real vs generated images.

    ``real`` and ``generated`` map descriptor name to a list of values.
    """
    names = list(real)
    fig, axes = plt.subplots(1, len(names), figsize=(3.6 * len(names), 3.6), squeeze=False)
    for ax, name in zip(axes[0], names):
        r = [v for v in real[name] if np.isfinite(v)]
        g = [v for v in generated.get(name, []) if np.isfinite(v)]
        bp = ax.boxplot([r, g], patch_artist=True)
        ax.set_xticks([1, 2], ["real", "generated"])
        for patch, col in zip(bp["boxes"], (REAL_COLOR, GEN_COLOR)):
            patch.set_facecolor(col)
            patch.set_alpha(0.5)
        title = name.replace("_", " ")
        if labels and name in labels:
            title += f"\n{labels[name]}"
        ax.set_title(title, fontsize=9)
    return _save(fig, path, metadata)


def plot_representativeness(report, path, metadata=None):
    """Porosity and permeability histograms for real sub-images vs generated candidates."""
    depths = sorted(report.distributions)
    fig, axes = plt.subplots(len(depths), 2, figsize=(10, 3 * len(depths)), squeeze=False)
    rows = {r.depth_index: r for r in report.rows}
    for i, d in enumerate(depths):
        dist = report.distributions[d]
        real = np.array(dist["real"])
        gen = np.array(dist["generated_candidates"])
        for j, (col, name) in enumerate(((0, "porosity"), (1, "permeability (mD)"))):
            ax = axes[i, j]
            bins = np.histogram_bin_edges(np.concatenate([real[:, col], gen[:, col]]), 20)
            ax.hist(real[:, col], bins=bins, color=REAL_COLOR, alpha=0.5, label="real sub-images")
            ax.hist(gen[:, col], bins=bins, color=GEN_COLOR, alpha=0.5, label="generated")
            tgt = rows[d].core_porosity if col == 0 else rows[d].core_permeability
            ax.axvline(tgt, color="k", ls="--", lw=0.8)
            ax.set_xlabel(name)
            ax.set_title(f"depth {d}", fontsize=9)
        axes[i, 0].legend(frameon=False, fontsize=8)
    return _save(fig, path, metadata)


def plot_image_grid(images, path, titles=None, ncols=5, metadata=None):
    n = len(images)
    nrows = max(1, int(np.ceil(n / ncols)))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2 * ncols, 2 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for k, im in enumerate(images):
        ax = axes.ravel()[k]
        arr = np.asarray(im)
        if arr.dtype != np.uint8:
            arr = np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)
        ax.imshow(arr)
        if titles:
            ax.set_title(titles[k], fontsize=8)
    return _save(fig, path, metadata)
