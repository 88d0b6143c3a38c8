"""Static figures from plot-data CSVs (mean line with a 25-75% quantile band per arm)."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402

FORMATS = (".svg", ".png", ".pdf")


def _series(rows):
    arms = {}
    for row in rows:
        a = arms.setdefault(row["arm"], {"k": [], "mean": [], "q25": [], "q75": []})
        a["k"].append(int(row["iteration"]))
        for key in ("mean", "q25", "q75"):
            a[key].append(float(row[key]))
    return arms


def plot_error_curves(rows, path, target_iterations=None, title=None, logy=True):
    """Render squared stationary-norm error against iteration for every arm in ``rows``.

    ``target_iterations`` maps an arm to the iteration where its temperature
    reaches the target; a dashed vertical marker is drawn there (for
    homotopy arms, where it is positive).
    """
    path = Path(path)
    if path.suffix not in FORMATS:
        raise ConfigError(f"unsupported figure format {path.suffix!r}; use one of {FORMATS}")
    arms = _series(rows)
    if not arms:
        raise ConfigError("no plot rows to draw")
    # fixed metadata keeps the SVG/PDF output byte-stable between runs
    matplotlib.rcParams["svg.hashsalt"] = "softfqi"
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, (arm, d) in enumerate(sorted(arms.items())):
        color = f"C{i}"
        ax.plot(d["k"], d["mean"], color=color, lw=1.6, label=arm)
        ax.fill_between(d["k"], d["q25"], d["q75"], color=color, alpha=0.25, lw=0)
        k_target = (target_iterations or {}).get(arm, 0)
        if k_target > 0:
            ax.axvline(k_target, color=color, ls="--", lw=0.9)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("iteration k")
    ax.set_ylabel(r"$\|Q_k - Q^\star\|^2_{2,\mu^\star}$")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else (
        {"CreationDate": None} if path.suffix == ".pdf" else {})
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path
