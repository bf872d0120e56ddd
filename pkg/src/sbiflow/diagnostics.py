"""Plot-ready tables and comparison statistics for posterior samples."""

from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import stats

from .io import write_csv

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


def summary_stats(samples):
    """Per column: mean, sd and the quantiles in ``QUANTILES``."""
    x = np.asarray(samples, dtype=float)
    q = np.quantile(x, QUANTILES, axis=0)
    return {"mean": x.mean(0), "sd": x.std(0, ddof=1), "quantiles": q}


def coverage(samples, truth, level=0.95):
    """Whether each true value lies inside the central ``level`` interval."""
    x = np.asarray(samples, dtype=float)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(x, [tail, 1.0 - tail], axis=0)
    truth = np.asarray(truth, dtype=float)
    return (truth >= lo) & (truth <= hi)


def ks_distances(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.array([stats.ks_2samp(a[:, j], b[:, j]).statistic for j in range(a.shape[1])])


def wasserstein_distances(a, b, widths=None):
    """Marginal Wasserstein-1 distances, optionally divided by the prior widths."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = np.array([stats.wasserstein_distance(a[:, j], b[:, j]) for j in range(a.shape[1])])
    return d if widths is None else d / np.asarray(widths, dtype=float)


def marginal_modes(samples, low=None, high=None, n_grid=512):
    """Mode of a Gaussian-kernel density estimate of each marginal."""
    x = np.asarray(samples, dtype=float)
    low = x.min(0) if low is None else np.asarray(low, dtype=float)
    high = x.max(0) if high is None else np.asarray(high, dtype=float)
    modes = []
    for j in range(x.shape[1]):
        grid = np.linspace(low[j], high[j], n_grid)
        col = x[:, j]
        if np.ptp(col) == 0:
            modes.append(col[0])
            continue
        modes.append(grid[np.argmax(stats.gaussian_kde(col)(grid))])
    return np.array(modes)


def histogram_rows(samples, names, low, high, bins=50):
    rows = []
    x = np.asarray(samples, dtype=float)
    for j, name in enumerate(names):
        counts, edges = np.histogram(x[:, j], bins=bins, range=(low[j], high[j]))
        width = edges[1] - edges[0]
        dens = counts / max(len(x), 1) / width
        rows += [(name, edges[i], edges[i + 1], int(counts[i]), dens[i]) for i in range(bins)]
    return rows


def pair_histogram_rows(samples, names, low, high, bins=50):
    rows = []
    x = np.asarray(samples, dtype=float)
    for i, j in combinations(range(len(names)), 2):
        counts, ex, ey = np.histogram2d(
            x[:, i], x[:, j], bins=bins, range=[(low[i], high[i]), (low[j], high[j])]
        )
        for a in range(bins):
            for b in range(bins):
                rows.append((names[i], names[j], ex[a], ex[a + 1], ey[b], ey[b + 1], int(counts[a, b])))
    return rows


def diagnose(samples, names, out_dir, low=None, high=None, other=None, truth=None, bins=50):
    """Write histogram, pair-histogram, summary and comparison tables; return the numbers.

    Histograms span ``[low, high]`` (the prior box when known, otherwise the
    pooled sample range).
    """
    out = Path(out_dir)
    x = np.asarray(samples, dtype=float)
    pooled = x if other is None else np.vstack([x, np.asarray(other, dtype=float)])
    low = pooled.min(0) if low is None else np.asarray(low, dtype=float)
    high = pooled.max(0) if high is None else np.asarray(high, dtype=float)
    high = np.where(high > low, high, low + 1.0)

    write_csv(out / "histograms.csv", ["param", "bin_lo", "bin_hi", "count", "density"],
              histogram_rows(x, names, low, high, bins))
    write_csv(out / "pair_histograms.csv", ["param_x", "param_y", "x_lo", "x_hi", "y_lo", "y_hi", "count"],
              pair_histogram_rows(x, names, low, high, bins))
    s = summary_stats(x)
    header = ["param", "mean", "sd", *[f"q{100 * q:g}" for q in QUANTILES]]
    write_csv(out / "summary.csv", header,
              [(n, s["mean"][j], s["sd"][j], *s["quantiles"][:, j]) for j, n in enumerate(names)])
    result = {"names": list(names), "mean": s["mean"], "sd": s["sd"]}
    if truth is not None:
        cov = coverage(x, truth)
        write_csv(out / "coverage.csv", ["param", "truth", "covered_95"],
                  [(n, truth[j], bool(cov[j])) for j, n in enumerate(names)])
        result["covered"] = cov
    if other is not None:
        ks = ks_distances(x, other)
        w1 = wasserstein_distances(x, other, high - low)
        write_csv(out / "comparison.csv", ["param", "ks", "wasserstein_per_width"],
                  [(n, ks[j], w1[j]) for j, n in enumerate(names)])
        result["ks"] = ks
        result["wasserstein"] = w1
    return result
