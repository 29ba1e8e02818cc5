"""Figures rendered next to run logs and report tables."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# No software/date stamps so identical inputs give identical PNG bytes.
_PNG_META = {"Software": None}

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curves(history, path, title=None):
    """Per-epoch total loss and every logged component, log-scaled."""
    epochs = [h["epoch"] for h in history]
    keys = [k for k in (history[0] if history else {}) if k not in ("epoch", "lr")]
    with plt.rc_context(STYLE):
        fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                        gridspec_kw={"height_ratios": [3, 1]})
        for key in keys:
            values = np.array([h.get(key, np.nan) for h in history], dtype=float)
            style = {"lw": 2.0, "color": "k"} if key == "total" else {"lw": 1.0}
            ax.plot(epochs, np.clip(values, 1e-12, None), label=key, **style)
        if history:
            ax.set_yscale("log")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7, ncol=2)
        ax_lr.step(epochs, [h["lr"] for h in history], where="post", color="tab:gray")
        ax_lr.set_ylabel("lr")
        ax_lr.set_xlabel("epoch")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_report(report, path):
    """Grouped DSC bars per organ, one colour per method."""
    methods = report.methods()
    organs = report.organs() + ["Avg"]
    x = np.arange(len(organs))
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(organs), 3.2))
        for i, m in enumerate(methods):
            vals = [report.row(m, o).dsc_percent for o in organs]
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels([f"organ {o}" if o != "Avg" else o for o in organs])
        ax.set_ylabel("DSC (%)")
        lows = [r.dsc_percent for r in report.rows]
        ax.set_ylim(max(0.0, min(lows, default=0.0) - 5.0), 100.0)
        ax.legend(fontsize=7, loc="lower right")
        fig.tight_layout()
        _save(fig, path)


def plot_uncertainty(image, umap, path):
    """Input slice beside its teacher uncertainty (dark = uncertain)."""
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(6, 3))
        a.imshow(image, cmap="gray")
        a.set_title("image")
        b.imshow(1.0 - np.asarray(umap), cmap="gray", vmin=0.5, vmax=1.0)
        b.set_title("teacher uncertainty")
        for ax in (a, b):
            ax.set_axis_off()
        fig.tight_layout()
        _save(fig, path)
