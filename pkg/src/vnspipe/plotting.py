"""Figures written next to the CSV output of the command line runs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_trajectory(traj: np.ndarray, L: float, path):
    t, x1, x2, v1, v2 = traj.T
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.6))
    ax[0].plot(x1, x2, lw=1.2)
    ax[0].add_patch(plt.Rectangle((-L, -1), 2 * L, 2, fill=False, ls="--", color="0.5"))
    ax[0].set_xlabel("x1")
    ax[0].set_ylabel("x2")
    ax[0].set_title("position")
    ax[1].plot(t, v1, label="v1")
    ax[1].plot(t, v2, label="v2")
    ax[1].set_xlabel("t")
    ax[1].legend()
    ax[1].set_title("velocity")
    return _save(fig, path)


def plot_egc(samples: np.ndarray, offenders: np.ndarray, path):
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.6))
    ax[0].scatter(samples[:, 1], samples[:, 3], s=4, c="0.6", label="samples")
    ax[1].scatter(samples[:, 1], samples[:, 1] + samples[:, 3], s=4, c="0.6")
    if len(offenders):
        ax[0].scatter(offenders[:, 1], offenders[:, 3], s=10, c="C3", label="offenders")
        ax[1].scatter(offenders[:, 1], offenders[:, 1] + offenders[:, 3], s=10, c="C3")
    ax[0].set_xlabel("x2")
    ax[0].set_ylabel("v2")
    ax[0].legend(fontsize=8)
    ax[1].set_xlabel("x2")
    ax[1].set_ylabel("x2 + v2")
    return _save(fig, path)


def plot_fixed_point(updates, m0: np.ndarray, extent, path):
    fig, ax = plt.subplots(1, 2, figsize=(10, 3.6))
    k = np.arange(1, len(updates) + 1)
    ax[0].semilogy(k, np.maximum(updates, 1e-300), "o-")
    ax[0].set_xlabel("iteration")
    ax[0].set_ylabel("sup-norm update")
    im = ax[1].imshow(m0.T, origin="lower", extent=extent, aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax[1])
    ax[1].set_title("m0 of the stationary density")
    ax[1].set_xlabel("x1")
    ax[1].set_ylabel("x2")
    return _save(fig, path)


def plot_ledger(rows: np.ndarray, columns, path):
    c = {name: i for i, name in enumerate(columns)}
    fig, ax = plt.subplots(1, 2, figsize=(10, 3.6))
    t = rows[:, c["t"]] if len(rows) else np.zeros(0)
    for name in ("E", "grad_diss", "drag_diss"):
        if len(rows):
            ax[0].plot(t, rows[:, c[name]], label=name)
    ax[0].set_xlabel("t")
    ax[0].legend(fontsize=8)
    if len(rows):
        ax[1].plot(t, rows[:, c["residual"]], color="C3")
    ax[1].set_xlabel("t")
    ax[1].set_ylabel("energy balance residual")
    return _save(fig, path)


def plot_decay(t, y, fit, path, raw=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, np.maximum(y, 1e-300), label="|u - u_ref|_2")
    if raw is not None:
        ax.semilogy(t, np.maximum(raw, 1e-300), ls=":", label="|u - u_bar|_2")
    lo, hi = fit.window
    tt = np.linspace(lo, hi, 50)
    ax.semilogy(tt, fit.H_fit * np.exp(-fit.lambda_fit * tt), "k--", label=f"fit, rate {fit.lambda_fit:.3g}")
    if np.isfinite(fit.lambda_gronwall):
        ax.semilogy(tt, fit.H_fit * np.exp(-fit.lambda_gronwall * tt), "C2-.",
                    label=f"Gronwall rate {fit.lambda_gronwall:.3g}")
    ax.axvspan(lo, hi, color="0.9", zorder=0)
    ax.set_xlabel("t")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_phi(p, lam, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.linspace(0, 1.2 * p.kappa, 300)
    ax.plot(x, p.phi(x))
    ax.axhline(0, color="0.5", lw=0.8)
    ax.axvline(lam, color="C3", ls="--", label=f"root {lam:.6g}")
    ax.set_xlabel("lambda")
    ax.set_ylabel("phi(lambda)")
    ax.legend()
    return _save(fig, path)


def plot_series(x, ys: dict, path, xlabel="t", logy=False):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, y in ys.items():
        (ax.semilogy if logy else ax.plot)(x, y, label=name)
    ax.set_xlabel(xlabel)
    ax.legend(fontsize=8)
    return _save(fig, path)
