"""Static figures written to disk: prediction bands and loss curves."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.dates as mdates  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (8.0, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def draw_predictions(ax, dates, observed, mean, std, label="ensemble mean"):
    """Observed depth, ensemble mean and a two-sigma band on ``ax``.

    Depth grows downward: the y axis is inverted so shallower water sits on
    top.
    """
    dates = np.asarray(dates, dtype="datetime64[D]").astype("datetime64[ms]").astype(object)
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    if observed is not None:
        ax.plot(dates, observed, color="k", lw=1.2, label="observed")
    ax.plot(dates, mean, color="tab:blue", lw=1.2, label=label)
    ax.fill_between(dates, mean - 2 * std, mean + 2 * std, color="tab:blue", alpha=0.25, lw=0,
                    label=r"$\pm 2\sigma$")
    if not ax.yaxis_inverted():
        ax.invert_yaxis()
    ax.set_ylabel("water table depth [m]")
    ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m"))
    ax.legend(loc="best")
    return ax


def plot_predictions(dates, observed, mean, std, path, title=None, label="ensemble mean"):
    """Write the prediction figure to ``path``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        draw_predictions(ax, dates, observed, mean, std, label)
        if title:
            ax.set_title(title)
        fig.autofmt_xdate()
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def plot_loss_curves(histories, path, title=None):
    """Train (solid) and validation (dashed) MSE per epoch for every member."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, h in enumerate(histories):
            color = f"C{i % 10}"
            ax.plot(h.train_mse, color=color, lw=1.0)
            ax.plot(h.val_mse, color=color, lw=1.0, ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE (normalized)")
        ax.set_yscale("log")
        ax.plot([], [], color="k", label="train")
        ax.plot([], [], color="k", ls="--", label="validation")
        ax.legend()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
