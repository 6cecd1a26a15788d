"""Figure rendering for estimator runs.

Every CLI report writes a PNG next to its CSV/JSON output.  Rendering is
headless (Agg) and deterministic: fixed size, fixed dpi, no timestamps in
the PNG metadata.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 110, "metadata": {"Date": None}}


def _new_axes(title, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return fig, ax


def save_decay_fit(fit, target, path, title, xlabel="scale (log-radius units)"):
    """Log-mean decay points with the fitted line and the closed-form slope."""
    fig, ax = _new_axes(title, xlabel, "log mean")
    x = np.asarray(fit.scales, dtype=float)
    y = np.asarray(fit.log_means, dtype=float)
    err = np.asarray(fit.per_scale_stderr or [0.0] * len(x))
    ax.errorbar(x, y, yerr=err, fmt="o", capsize=3, label="estimates")
    xx = np.linspace(x.min(), x.max(), 64)
    ax.plot(xx, fit.intercept + fit.slope * xx, "-",
            label=f"fit: slope {fit.slope:+.4f}")
    if target is not None:
        anchor = fit.intercept + fit.slope * x.mean() + target * x.mean()
        ax.plot(xx, anchor - target * xx, "--",
                label=f"closed form: slope {-target:+.4f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_density_comparison(bin_centers, mc_density, series_density, path,
                            title="strip exit density"):
    fig, ax = _new_axes(title, "exit position", "density")
    width = bin_centers[1] - bin_centers[0] if len(bin_centers) > 1 else 0.1
    ax.bar(bin_centers, mc_density, width=0.9 * width, alpha=0.5,
           label="conditioned walks")
    ax.plot(bin_centers, series_density, "r-", lw=2, label="series")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_power_trace(result, target, path, title="eigenvalue iteration"):
    fig, ax = _new_axes(title, "step", "running exponent estimate")
    steps = [row[0] for row in result.trace]
    xi_run = [row[3] for row in result.trace]
    ax.plot(steps, xi_run, "o-", ms=3, label="running estimate")
    if target is not None:
        ax.axhline(target, color="r", ls="--", label=f"closed form {target:.4f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_boxcount(table, fit, target, path, title="box counting"):
    fig, ax = _new_axes(title, "box size (cells)", "boxes hit")
    ax.loglog(table.box_sizes, table.counts, "o", base=2, label="counts")
    x = np.asarray(fit.scales, dtype=float)
    ax.loglog(x, 2.0 ** (fit.intercept + fit.slope * np.log2(x)), "-",
              label=f"fit: dimension {-fit.slope:.3f}")
    if target is not None:
        mid = float(np.sqrt(x.min() * x.max()))
        midy = 2.0 ** (fit.intercept + fit.slope * np.log2(mid))
        xx = np.array([x.min(), x.max()])
        ax.loglog(xx, midy * (xx / mid) ** (-target), "--",
                  label=f"target dimension {target:.3f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_coupling_decay(ns, mismatch, path, title="coupled-ensemble mismatch"):
    fig, ax = _new_axes(title, "steps", "mismatch fraction")
    ax.semilogy(ns, np.maximum(mismatch, 1e-6), "o-")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_ratio_bars(labels, ratios, path, title="separation ratios"):
    fig, ax = _new_axes(title, "configuration", "weighted fraction separated")
    ax.bar(range(len(ratios)), ratios)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
