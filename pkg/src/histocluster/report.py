"""Hazard-ratio tables, Kaplan-Meier figures and cluster montages."""
from __future__ import annotations

import csv
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Cut-offs as actually applied in the published hazard-ratio table
# (e.g. p = 0.0036 is printed with three stars).
TABLE_STARS = ((0.01, "***"), (0.05, "**"), (0.1, "*"))
# The conventional R legend.
LEGEND_STARS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "."))
SIGNIF_NOTE = {
    "table": "Significance codes: '***' p < 0.01, '**' p < 0.05, '*' p < 0.1",
    "legend": "Significance codes:  0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1",
}


def stars(p, scheme="table"):
    cuts = TABLE_STARS if scheme == "table" else LEGEND_STARS
    if p is None or not np.isfinite(p):
        return ""
    for cut, mark in cuts:
        if p < cut:
            return mark
    return ""


def format_hr(hr, lo, hi, p, scheme="table"):
    return f"{hr:.3f}{stars(p, scheme)} ({lo:.3f} - {hi:.3f})"


def format_stat(test, scheme="table"):
    return f"{test.stat:.2f}{stars(test.p, scheme)}"


def combo_label(combo):
    return " + ".join(str(c) for c in combo)


def hazard_table(univariate, combos, clusters, scheme="table", label="Cluster"):
    """Markdown table: univariate column then one column per multivariate model.

    ``univariate`` maps cluster name -> single-covariate fit; ``combos`` maps
    a tuple of cluster names -> multivariate fit.
    """
    combos = dict(combos)
    header = ["", "Univariate"] + [combo_label(c) for c in combos]
    rows = []
    for name in clusters:
        row = [f"{label} {name}"]
        fit = univariate.get(name)
        row.append(format_hr(fit.hr[0], fit.ci_low[0], fit.ci_high[0], fit.p[0], scheme) if fit else "")
        for combo, mfit in combos.items():
            if name in combo:
                j = mfit.names.index(name)
                row.append(format_hr(mfit.hr[j], mfit.ci_low[j], mfit.ci_high[j], mfit.p[j], scheme))
            else:
                row.append("")
        rows.append(row)
    for title, attr in (("Wald Test", "wald"), ("Likelihood Ratio Test", "lrt"),
                        ("Score (Log-Rank) Test", "score")):
        rows.append([title, ""] + [format_stat(getattr(f, attr), scheme) for f in combos.values()])
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    lines.append("")
    lines.append(SIGNIF_NOTE[scheme])
    return "\n".join(lines) + "\n"


def model_summary(fit, scheme="table", title="Model"):
    lines = [f"## {title}", "", "| covariate | HR (95% CI) | coef | se | z | p |", "|---|---|---|---|---|---|"]
    for j, name in enumerate(fit.names):
        lines.append(
            f"| {name} | {format_hr(fit.hr[j], fit.ci_low[j], fit.ci_high[j], fit.p[j], scheme)} | "
            f"{fit.coef[j]:.4f} | {fit.se[j]:.4f} | {fit.z[j]:.3f} | {fit.p[j]:.4g} |"
        )
    lines.append("")
    for t, attr in (("Likelihood Ratio Test", "lrt"), ("Wald Test", "wald"), ("Score (Log-Rank) Test", "score")):
        s = getattr(fit, attr)
        lines.append(f"- {t}: {s.stat:.2f} on {s.df} df, p = {s.p:.4g}")
    lines.append(f"- n = {fit.n}, events = {fit.n_events}, ties = {fit.ties}, "
                 f"converged = {fit.converged}, separated = {fit.separated}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Kaplan-Meier


KM_FIELDS = ["group", "time", "survival", "at_risk", "events", "censored"]


def write_km_series(path, curves):
    """``curves`` maps group label -> KMCurve."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(KM_FIELDS)
        for group, c in curves.items():
            for i in range(len(c.times)):
                w.writerow([group, f"{c.times[i]:.6g}", f"{c.survival[i]:.10f}",
                            int(c.at_risk[i]), int(c.events[i]), int(c.censored[i])])


def _steps(curve):
    t = np.concatenate([[0.0], curve.times])
    s = np.concatenate([[1.0], curve.survival])
    return t, s


def plot_km(path, curves, title="", p_value=None, colors=("tab:red", "tab:blue")):
    """Three stacked panels: survival, number at risk, censoring ticks.  Returns the tick count."""
    plt.rcParams["svg.hashsalt"] = "histocluster"
    fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True,
                             gridspec_kw={"height_ratios": [4, 1.3, 1.0]})
    ax_s, ax_n, ax_c = axes
    n_ticks = 0
    tmax = max(float(c.times.max()) for c in curves.values())
    for (group, c), color in zip(curves.items(), colors):
        t, s = _steps(c)
        ax_s.step(t, s, where="post", color=color, label=str(group))
        cens = c.censored > 0
        if cens.any():
            ct = c.times[cens]
            ax_s.plot(ct, c.survival[cens], "|", color=color, markersize=8, gid=f"censor-{group}")
            n_ticks += int(cens.sum())
        # number at risk just after each observed time, as a step
        remaining = c.at_risk - c.events - c.censored
        ax_n.step(np.concatenate([[0.0], c.times]), np.concatenate([[c.at_risk[0]], remaining]),
                  where="post", color=color)
        if cens.any():
            ax_c.plot(c.times[cens], np.full(int(cens.sum()), list(curves).index(group)), "|",
                      color=color, markersize=10, gid=f"censor-row-{group}")
    ax_s.set_ylim(-0.02, 1.02)
    ax_s.set_ylabel("Recurrence-free survival")
    heading = title
    if p_value is not None:
        heading = f"{title}  (log-rank p = {p_value:.3g})".strip()
    ax_s.set_title(heading, fontsize=10)
    ax_s.legend(loc="lower left", fontsize=8, frameon=False)
    ax_n.set_ylabel("At risk", fontsize=8)
    ax_c.set_yticks(range(len(curves)))
    ax_c.set_yticklabels([str(g) for g in curves], fontsize=7)
    ax_c.set_ylim(-0.5, len(curves) - 0.5)
    ax_c.set_ylabel("Censored", fontsize=8)
    ax_c.set_xlabel("Time (months)")
    ax_c.set_xlim(0, tmax * 1.02)
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    return n_ticks


# ---------------------------------------------------------------------------
# montage


def write_montage_index(path, samples):
    """``samples`` maps cluster -> list of TileRef."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["cluster", "slide_id", "row", "col", "x", "y", "size"])
        for cluster in sorted(samples):
            for t in samples[cluster]:
                w.writerow([cluster, t.slide_id, t.row, t.col, t.x, t.y, t.size])


def montage_image(rows, pad=2, background=255):
    """Grid of tiles, one row per cluster; ``rows`` is a list of lists of uint8 arrays."""
    rows = [r for r in rows if r]
    if not rows:
        return np.full((1, 1, 3), background, np.uint8)
    size = rows[0][0].shape[0]
    ncol = max(len(r) for r in rows)
    out = np.full((len(rows) * (size + pad) + pad, ncol * (size + pad) + pad, 3), background, np.uint8)
    for i, r in enumerate(rows):
        for j, tile in enumerate(r):
            tile = tile if tile.ndim == 3 else np.repeat(tile[..., None], 3, axis=2)
            y, x = pad + i * (size + pad), pad + j * (size + pad)
            out[y:y + size, x:x + size] = tile
    return out
