#!/usr/bin/env python3
"""Render the CSV outputs of `qsdlab solve` / `qsdlab simulate` to PNGs.

Usage: python3 scripts/plot_fields.py OUTDIR [OUTDIR ...]

Looks for fields.csv, survival.csv, histogram.csv and costs.csv in each
directory and writes a PNG next to each file it finds.  Purely cosmetic —
nothing in the library or the test suite depends on this script.
"""

import os
import sys

import numpy as np

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit("matplotlib is required for plotting (pip install matplotlib)")


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        fh.readline()  # provenance comment
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=2)
    if data.ndim == 1:
        data = data[None, :]
    return header, {name: data[:, i] for i, name in enumerate(header)}


def is_2d(cols):
    return "x1" in cols


def plot_fields(path, out):
    header, cols = read_csv(path)
    if is_2d(cols):
        n = int(round(len(cols["x0"]) ** 0.5))
        fig, axes = plt.subplots(2, 2, figsize=(9, 8))
        for ax, name in zip(axes.ravel(), ["psi", "phi", "mu", "Psi"]):
            z = cols[name].reshape(n, n)
            im = ax.pcolormesh(cols["x0"].reshape(n, n), cols["x1"].reshape(n, n), z)
            ax.set_title(name)
            fig.colorbar(im, ax=ax)
    else:
        x = cols["x0"]
        fig, axes = plt.subplots(1, 3, figsize=(13, 4))
        for name in ("psi", "phi", "phi_tilde", "mu"):
            axes[0].plot(x, cols[name], label=name)
        axes[0].legend(); axes[0].set_title("eigenfields")
        for name in ("Psi", "Phi_tilde"):
            axes[1].plot(x, cols[name], label=name)
        axes[1].legend(); axes[1].set_title("value functions")
        for name in header:
            if name.startswith("drift_"):
                axes[2].plot(x, cols[name], label=name)
        axes[2].set_ylim(-30, 30)
        axes[2].legend(); axes[2].set_title("optimal drifts")
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)


def plot_survival(path, out):
    _, cols = read_csv(path)
    keep = cols["p_hat"] > 0
    t, p = cols["t"][keep], cols["p_hat"][keep]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, p, ".", ms=3)
    # overlay the least-squares exponential through the tail-weighted curve
    lam = -np.polyfit(t, np.log(p), 1)[0]
    ax.semilogy(t, p[0] * np.exp(-lam * (t - t[0])), "-",
                label=f"slope {lam:.4g}")
    ax.set_xlabel("t"); ax.set_ylabel("P(tau > t)"); ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)


def plot_histogram(path, out):
    header, cols = read_csv(path)
    ref = header[-1]
    fig, ax = plt.subplots(figsize=(6, 4))
    if is_2d(cols):
        n = int(round(len(cols["x0"]) ** 0.5))
        im = ax.pcolormesh(cols["x0"].reshape(n, n), cols["x1"].reshape(n, n),
                           (cols["density"] - cols[ref]).reshape(n, n),
                           cmap="RdBu_r")
        fig.colorbar(im, ax=ax, label=f"density - {ref}")
    else:
        ax.plot(cols["x0"], cols["density"], ".", label="empirical")
        ax.plot(cols["x0"], cols[ref], "-", label=ref)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)


def plot_costs(path, out):
    _, cols = read_csv(path)
    t = cols["t"][1:]
    fig, ax = plt.subplots(figsize=(6, 4))
    total = cols["cost_control_cum"][1:] + cols["cost_potential_cum"][1:]
    ax.plot(t, total / t, label="running cost average")
    ax.set_xlabel("t"); ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=130)
    plt.close(fig)


RENDERERS = {
    "fields.csv": plot_fields,
    "survival.csv": plot_survival,
    "histogram.csv": plot_histogram,
    "costs.csv": plot_costs,
}


def main(argv):
    if not argv:
        sys.exit(__doc__)
    for outdir in argv:
        for name, render in RENDERERS.items():
            path = os.path.join(outdir, name)
            if os.path.exists(path):
                png = path[:-4] + ".png"
                render(path, png)
                print("wrote", png)


if __name__ == "__main__":
    main(sys.argv[1:])
