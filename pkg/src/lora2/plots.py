import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "savefig.dpi": 150,
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_figure(history, path):
    steps = [r["step"] for r in history.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(steps, [r["mse"] for r in history.rows], lw=1, label="mse")
        ax.semilogy(steps, [r["total"] for r in history.rows], lw=1, ls="--", label="total")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def rank_figure(history, path):
    ranks = np.array(history.ranks).T
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 0.35 * len(history.layer_names) + 1.2))
        im = ax.imshow(ranks, aspect="auto", interpolation="nearest", cmap="viridis",
                       extent=(0.5, ranks.shape[1] + 0.5, len(ranks) - 0.5, -0.5))
        ax.set_yticks(range(len(history.layer_names)), history.layer_names)
        ax.set_xlabel("step")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label="rank")
        return _save(fig, path)


def run_figures(history, outdir):
    return [loss_figure(history, outdir / "loss.png"), rank_figure(history, outdir / "ranks.png")]


def tradeoff_figure(rows, path):
    """Final mse against checkpoint size; fixed ranks as a line, adaptive as a star."""
    fixed = [r for r in rows if r.rank is not None]
    adaptive = [r for r in rows if r.rank is None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog([r.bytes for r in fixed], [r.final_mse for r in fixed], "o-", lw=1,
                  label="fixed rank")
        for r in fixed:
            ax.annotate(str(r.rank), (r.bytes, r.final_mse), textcoords="offset points",
                        xytext=(3, 3), fontsize=7)
        if adaptive:
            ax.loglog([r.bytes for r in adaptive], [r.final_mse for r in adaptive], "*",
                      ms=12, label="adaptive")
        ax.set_xlabel("checkpoint bytes")
        ax.set_ylabel("final mse")
        ax.legend(frameon=False)
        return _save(fig, path)
