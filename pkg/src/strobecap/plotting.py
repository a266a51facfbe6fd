"""Line plots of sweep results."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

AXIS_LABELS = {
    "n_strobes": "number of strobes N",
    "ambient_strength": "ambient strength",
    "albedo_blend": "albedo blend",
    "n_cameras": "number of cameras M",
    "motion_variance": "motion variance",
}


def plot_sweep(rows, parameter, path, title=None):
    """MAE against the swept value with one-std error bars; ``rows`` from ``summarize``."""
    rows = list(rows)
    x = np.array([float(r[0]) for r in rows])
    y = np.array([r[1] for r in rows], dtype=float)
    err = np.array([r[2] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(4.0, 3.0), dpi=120)
    ax.errorbar(x, y, yerr=np.nan_to_num(err), marker="o", capsize=3, color="tab:blue")
    ax.set_xlabel(AXIS_LABELS.get(parameter, parameter))
    ax.set_ylabel("held-out MAE")
    ax.set_xticks(x)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
