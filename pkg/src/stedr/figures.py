"""Static figures rendered from the CSV tables the screen and emulate commands write."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_METADATA = {"png": {"Software": None}, "svg": {"Date": None}, "pdf": {"CreationDate": None}}


def _float(s):
    return float(s) if s not in ("", None) else math.nan


def read_drug_table(path):
    """{drug: [(label, mean, low, up, p_adj)]} plus {drug: verdict}."""
    rows, verdicts = defaultdict(list), {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            d = int(r["drug"])
            verdicts[d] = r["verdict"]
            rows[d].append((r["subgroup"], _float(r["mean"]), _float(r["low"]), _float(r["up"]),
                            _float(r["p_adj"])))
    return dict(rows), verdicts


def _save(fig, path, fmt):
    fig.savefig(path, format=fmt, metadata=_METADATA[fmt], dpi=120)
    plt.close(fig)


def forest_plots(table_path, out_dir, fmt="png"):
    """One forest plot per drug (overall plus each subgroup); returns written paths."""
    rows, verdicts = read_drug_table(table_path)
    written = []
    for drug in sorted(rows):
        entries = [e for e in rows[drug] if math.isfinite(e[1])]
        if not entries:
            continue
        fig, ax = plt.subplots(figsize=(5.5, 0.5 + 0.45 * len(entries)))
        y = np.arange(len(entries))[::-1]
        means = np.array([e[1] for e in entries])
        err = np.array([[m - e[2] for m, e in zip(means, entries)],
                        [e[3] - m for m, e in zip(means, entries)]])
        colors = ["tab:blue" if e[4] < 0.05 else "tab:gray" for e in entries]
        for i, c in enumerate(colors):
            ax.errorbar(means[i], y[i], xerr=err[:, i:i + 1], fmt="none", ecolor=c, capsize=3)
        ax.scatter(means, y, c=colors, zorder=3)
        ax.axvline(0.0, color="k", lw=0.8, ls="--")
        ax.set_yticks(y, [e[0] for e in entries])
        ax.set_xlabel("effect on outcome risk (95% CI)")
        ax.set_title(f"drug {drug}: {verdicts[drug]}", fontsize=10)
        fig.tight_layout()
        path = Path(out_dir) / f"forest_drug{drug}.{fmt}"
        _save(fig, path, fmt)
        written.append(path)
    return written


def read_heatmap(path):
    table = defaultdict(dict)
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            table[r["covariate"]][r["subgroup"]] = _float(r["score"])
    names = list(table)
    groups = sorted({g for v in table.values() for g in v})
    return names, groups, np.array([[table[n].get(g, math.nan) for g in groups] for n in names])


def attention_heatmap(csv_path, out_path, top=15):
    """Covariates with the most uneven relative attention across subgroups."""
    names, groups, scores = read_heatmap(csv_path)
    spread = np.nan_to_num(np.nanmax(scores, axis=1) - np.nanmin(scores, axis=1), nan=-1.0)
    keep = np.argsort(-spread, kind="stable")[:top]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(groups), 0.6 + 0.3 * len(keep)))
    im = ax.imshow(scores[keep], aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(groups)), groups)
    ax.set_yticks(range(len(keep)), [names[i] for i in keep])
    fig.colorbar(im, ax=ax, label="relative attention")
    fig.tight_layout()
    out_path = Path(out_path)
    _save(fig, out_path, out_path.suffix.lstrip("."))
    return out_path
