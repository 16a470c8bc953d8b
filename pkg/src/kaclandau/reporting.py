"""Report emission: delimited output plus rendered figures.

Every command writes its tables as CSV and a small set of matplotlib
figures next to them, together with the exact config and seed needed to
regenerate the directory.  CSV content is deterministic (repr-stable floats,
no timestamps); files are written atomically.
"""

import hashlib
import json
import os
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _atomic_write(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def write_csv(path, rows, columns=None):
    """Rows are dicts; column order is taken from the first row unless given."""
    path = Path(path)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def write_table_csv(path, table: dict):
    """Columns are equal-length arrays keyed by name."""
    keys = list(table.keys())
    n = len(np.asarray(table[keys[0]]))
    rows = [{k: np.asarray(table[k])[i] for k in keys} for i in range(n)]
    return write_csv(path, rows, columns=keys)


def write_json(path, obj):
    _atomic_write(Path(path), json.dumps(obj, indent=2, sort_keys=True) + "\n")


def prepare_output_dir(out_dir, config: dict, seed: int):
    """Create the directory and drop the config copy plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    write_json(out / "config.json", config)
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()
    write_json(out / "manifest.json", {"config_sha256": digest, "seed": int(seed)})
    return out


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def figure_trajectory(agg: dict, path):
    fig, axes = plt.subplots(2, 2, figsize=(9, 6.5), sharex=True)
    t = agg["t"]
    ax = axes[0, 0]
    for c in "xyz":
        ax.errorbar(t, agg["p" + c], yerr=agg["p" + c + "_se"], label="p" + c, lw=1)
    ax.set_ylabel("total momentum")
    ax.legend(fontsize=8)
    ax = axes[0, 1]
    ax.errorbar(t, agg["energy"], yerr=agg["energy_se"], color="k", lw=1)
    ax.set_ylabel("total kinetic energy")
    ax = axes[1, 0]
    ax.errorbar(t, agg["m2"], yerr=agg["m2_se"], label="mean |v|^2", lw=1)
    ax.errorbar(t, agg["m4"], yerr=agg["m4_se"], label="mean |v|^4", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("radial moments")
    ax.legend(fontsize=8)
    ax = axes[1, 1]
    ax.errorbar(t, agg["pair_stat"], yerr=agg["pair_stat_se"], color="C3", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("capped pair 1/r")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def figure_dissipation(rows, path):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    idx = np.arange(len(rows))
    for ax, key, label in ((axes[0], "entropy_defining", "entropy derivative"),
                           (axes[1], "fisher_raw", "Fisher derivative")):
        vals = np.array([r[key] for r in rows])
        ses = np.array([r[key + "_se"] for r in rows])
        ok = np.array([bool(r["sign_ok"]) for r in rows])
        ax.errorbar(idx[ok], vals[ok], yerr=3 * ses[ok], fmt="o", ms=3, label="pass")
        if np.any(~ok):
            ax.errorbar(idx[~ok], vals[~ok], yerr=3 * ses[~ok], fmt="x", ms=5,
                        color="r", label="fail")
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("density index")
        ax.set_title(label + " (3 SE bars)")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def figure_hierarchy(rows, path):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        sel = [r for r in rows if r["mode"] == mode]
        ns = np.array([r["n_particles"] for r in sel], dtype=float)
        res = np.array([abs(r["residual"]) for r in sel])
        se = np.array([r["residual_se"] for r in sel])
        ax.errorbar(ns, res, yerr=3 * se, fmt="o-", label=mode, ms=4)
    gaps = {}
    for r in rows:
        gaps.setdefault(r["n_particles"], {})[r["mode"]] = r["rhs"]
    ns = sorted(k for k, v in gaps.items() if len(v) == 2)
    if len(ns) >= 2:
        gap = [abs(gaps[n]["bbgky"] - gaps[n]["landau"]) for n in ns]
        ax.plot(ns, gap, "s--", color="gray", label="|bbgky - landau| gap")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("|weak-form residual|")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def figure_series(t, series, path, ylabel, bands=None, labels=None):
    fig, ax = plt.subplots(figsize=(5.5, 4))
    series = np.atleast_2d(np.asarray(series))
    for i, row in enumerate(series):
        lbl = labels[i] if labels else None
        ax.plot(t, row, "o-", ms=3, label=lbl)
        if bands is not None:
            ax.fill_between(t, row - bands[i], row + bands[i], alpha=0.2)
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    if labels:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def figure_covariance(t, measured, se, reference, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    names = ["xx", "yy", "zz"]
    for i in range(3):
        ax.errorbar(t, measured[:, i], yerr=3 * se[:, i], fmt="o", ms=3,
                    color=f"C{i}", label=f"sim {names[i]}")
        ax.plot(t, reference[:, i], "-", color=f"C{i}", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("covariance diagonal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
