"""Delimited summary tables and label overlay figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

# label -> RGB; 1 light blue, 2 green, 4 red
LABEL_COLORS = {1: (0.53, 0.81, 0.98), 2: (0.0, 0.75, 0.0), 4: (0.9, 0.0, 0.0)}
SEGMENTATION_ROWS = (("Dice", "dice"), ("Sensitivity", "sensitivity"),
                     ("Specificity", "specificity"), ("Hausdorff95", "hd95"))
REGION_ORDER = ("ET", "WT", "TC")
SURVIVAL_COLUMNS = (("Accuracy", "accuracy"), ("MSE", "mse"), ("medianSE", "median_se"),
                    ("stdSE", "std_se"), ("SpearmanR", "spearman_r"))


def segmentation_table(aggregate: dict, sep: str = "\t") -> str:
    """Rows Mean / StdDev per metric, columns ET, WT, TC."""
    header = sep.join(["Statistic"] + [f"{name}_{r}" for name, _ in SEGMENTATION_ROWS
                                       for r in REGION_ORDER])
    lines = [header]
    for stat in ("mean", "std"):
        cells = [stat.capitalize() if stat == "mean" else "StdDev"]
        for _, key in SEGMENTATION_ROWS:
            for r in REGION_ORDER:
                cells.append(f"{aggregate[key][r][stat]:.5f}")
        lines.append(sep.join(cells))
    return "\n".join(lines) + "\n"


def survival_table(report: dict, sep: str = "\t") -> str:
    header = sep.join(name for name, _ in SURVIVAL_COLUMNS)
    row = sep.join(f"{report[key]:.3f}" for _, key in SURVIVAL_COLUMNS)
    return header + "\n" + row + "\n"


def _overlay_rgba(labels2d: np.ndarray) -> np.ndarray:
    rgba = np.zeros(labels2d.shape + (4,))
    for lab, rgb in LABEL_COLORS.items():
        sel = labels2d == lab
        rgba[sel, :3] = rgb
        rgba[sel, 3] = 0.6
    return rgba


def focus_point(labels: np.ndarray) -> tuple[int, int, int]:
    """Tumor centroid (rounded), or the volume centre when no tumor is present."""
    idx = np.argwhere(labels > 0)
    if idx.size == 0:
        return tuple(s // 2 for s in labels.shape)
    return tuple(int(round(v)) for v in idx.mean(axis=0))


def _views(volume: np.ndarray, point):
    x, y, z = point
    # array axes are [x, y, z]; transpose so rows run along the second listed axis
    return (
        ("axial", volume[:, :, z].T),
        ("sagittal", volume[x, :, :].T),
        ("coronal", volume[:, y, :].T),
    )


def render_overlay(background: np.ndarray, label_sets: dict, path, title: str = "") -> Path:
    """One row per entry of ``label_sets`` (e.g. truth / prediction), three orthogonal views each."""
    path = Path(path)
    names = list(label_sets)
    point = focus_point(label_sets[names[0]])
    fig, axes = plt.subplots(len(names), 3, figsize=(9, 3 * len(names)), squeeze=False)
    gray = ListedColormap(plt.get_cmap("gray")(np.linspace(0, 1, 256)))
    for row, name in enumerate(names):
        bg_views = _views(background, point)
        lab_views = _views(label_sets[name], point)
        for col, ((view, bg), (_, lab)) in enumerate(zip(bg_views, lab_views)):
            ax = axes[row, col]
            ax.imshow(bg, cmap=gray, origin="lower", interpolation="nearest")
            ax.imshow(_overlay_rgba(lab), origin="lower", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(view)
            if col == 0:
                ax.set_ylabel(name)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path
