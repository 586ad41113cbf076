"""Static figures for trajectories, metric correlations and mixture-rate sweeps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_LABELS = {"ca": "CA (%)", "fid": "FID", "is_score": "IS", "kid": "KID", "cls_test_acc": "classifier test acc (%)"}


def plot_trajectories(results: list[dict], out_dir: str | Path) -> list[Path]:
    """One figure per condition; a line per model and seed for CA, FID and classifier accuracy."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_condition: dict = {}
    for r in results:
        by_condition.setdefault(r["condition"], []).append(r)
    written = []
    for condition, runs in by_condition.items():
        fig, axes = plt.subplots(1, 3, figsize=(14, 4))
        for r in runs:
            label = f"{r['row']} s{r['seed']}"
            epochs = [rep["epoch"] for rep in r["reports"]]
            axes[0].plot(epochs, [rep["ca"] for rep in r["reports"]], marker="o", label=label)
            axes[1].plot(epochs, [rep["fid"] for rep in r["reports"]], marker="o", label=label)
            cls = [(s, v) for s, m, v in r["trajectory"] if m == "cls_test_acc"]
            if cls:
                axes[2].plot(*zip(*cls), label=label)
        for ax, key, xl in zip(axes, ("ca", "fid", "cls_test_acc"), ("epoch", "epoch", "D/C step")):
            ax.set_xlabel(xl)
            ax.set_ylabel(_LABELS[key])
        axes[0].legend(fontsize=7)
        fig.suptitle(condition)
        fig.tight_layout()
        path = out_dir / f"trajectory_{condition.replace(' ', '_')}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def plot_correlations(results: list[dict], rho: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = [r["final"] for r in results if r.get("final")]
    pairs = sorted(rho)
    fig, axes = plt.subplots(1, max(len(pairs), 1), figsize=(3.2 * max(len(pairs), 1), 3.2), squeeze=False)
    for ax, (a, b) in zip(axes[0], pairs):
        ax.scatter([p[a] for p in points], [p[b] for p in points], s=12)
        ax.set_xlabel(_LABELS[a])
        ax.set_ylabel(_LABELS[b])
        ax.set_title(f"|rho| = {rho[(a, b)]:.3f}")
    fig.tight_layout()
    path = out_dir / "correlations.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_alpha_sweep(rows: list[dict], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    alphas = [r["alpha"] for r in rows]
    ax1.plot(alphas, [r["ca"] for r in rows], marker="o")
    ax2.plot(alphas, [r["fid"] for r in rows], marker="o")
    for ax, key in ((ax1, "ca"), (ax2, "fid")):
        ax.set_xlabel("mixture rate alpha")
        ax.set_ylabel(_LABELS[key])
    fig.tight_layout()
    path = out_dir / "alpha_sweep.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
