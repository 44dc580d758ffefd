"""Local non-stationarity profiles: ADF p-value, spectral entropy, volatility-of-volatility."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import SeriesFrame
from .errors import NumericError, UndefinedDiagnosticError

MAX_CHANNELS = 16
VOV_WINDOW_CAP = 256
VOV_DEFAULT_WINDOW = 24
P_FLOOR, P_CEIL = 0.001, 0.999

# Dickey-Fuller tau distribution, regression with constant and linear trend
# (Fuller 1976). Rows: sample size; columns: lower-tail probabilities.
DF_TREND_PROBS = np.array([0.01, 0.025, 0.05, 0.10, 0.90, 0.95, 0.975, 0.99])
DF_TREND_SIZES = np.array([25, 50, 100, 250, 500, np.inf])
DF_TREND_CRIT = np.array(
    [
        [-4.38, -3.95, -3.60, -3.24, -1.14, -0.80, -0.50, -0.15],
        [-4.15, -3.80, -3.50, -3.18, -1.19, -0.87, -0.58, -0.24],
        [-4.04, -3.73, -3.45, -3.15, -1.22, -0.90, -0.62, -0.28],
        [-3.99, -3.69, -3.43, -3.13, -1.23, -0.92, -0.64, -0.31],
        [-3.98, -3.68, -3.42, -3.13, -1.24, -0.93, -0.65, -0.32],
        [-3.96, -3.66, -3.41, -3.12, -1.25, -0.94, -0.66, -0.33],
    ]
)


def znormalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if std < 1e-12:
        raise UndefinedDiagnosticError("constant series has no defined scale")
    return (x - x.mean()) / std


# --------------------------------------------------------------------------- spectral entropy


def spectral_entropy(x: np.ndarray) -> float:
    """Normalized Shannon entropy of the DC-excluded power spectrum, in [0, 1].

    The series is z-normalized and truncated to the largest power-of-two
    length before the FFT.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 4:
        raise UndefinedDiagnosticError(f"spectral entropy needs at least 4 points, got {x.size}")
    z = znormalize(x)
    n = 1 << int(math.floor(math.log2(z.size)))
    power = np.abs(np.fft.rfft(z[:n])[1:]) ** 2
    total = power.sum()
    if total <= 0:
        raise UndefinedDiagnosticError("all-zero spectrum")
    p = power / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / math.log(power.size))


# --------------------------------------------------------------------------- VoV


def vov_window(points_per_day: float | None) -> int:
    if not points_per_day:
        return VOV_DEFAULT_WINDOW
    return int(min(VOV_WINDOW_CAP, max(2, round(points_per_day))))


def rolling_std(x: np.ndarray, window: int) -> np.ndarray:
    return sliding_window_view(np.asarray(x, dtype=np.float64), window).std(axis=-1)


def vov(x: np.ndarray, window: int = VOV_DEFAULT_WINDOW) -> float:
    """std / mean of the rolling-window standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    if window < 2:
        raise UndefinedDiagnosticError(f"VoV window must be >= 2, got {window}")
    if x.size < 2 * window:
        raise UndefinedDiagnosticError(f"VoV needs at least {2 * window} points, got {x.size}")
    sigma = rolling_std(x, window)
    mean = sigma.mean()
    if mean < 1e-12:
        raise UndefinedDiagnosticError("rolling std is identically zero")
    return float(sigma.std() / mean)


# --------------------------------------------------------------------------- ADF


def schwert_lags(n: int) -> int:
    return int(math.floor(12.0 * (n / 100.0) ** 0.25))


@dataclass
class AdfResult:
    statistic: float
    p_value: float
    lags: int
    nobs: int


def _crit_row(nobs: int) -> np.ndarray:
    """Critical values interpolated linearly in 1/n between table rows."""
    inv = 1.0 / DF_TREND_SIZES
    target = 1.0 / nobs
    # inv is decreasing; np.interp wants increasing abscissae
    return np.array([np.interp(target, inv[::-1], DF_TREND_CRIT[::-1, j]) for j in range(DF_TREND_PROBS.size)])


def df_trend_pvalue(stat: float, nobs: int) -> float:
    crit = _crit_row(nobs)
    if stat <= crit[0]:
        slope = (DF_TREND_PROBS[1] - DF_TREND_PROBS[0]) / (crit[1] - crit[0])
        p = DF_TREND_PROBS[0] + slope * (stat - crit[0])
    elif stat >= crit[-1]:
        slope = (DF_TREND_PROBS[-1] - DF_TREND_PROBS[-2]) / (crit[-1] - crit[-2])
        p = DF_TREND_PROBS[-1] + slope * (stat - crit[-1])
    else:
        p = float(np.interp(stat, crit, DF_TREND_PROBS))
    return float(min(P_CEIL, max(P_FLOOR, p)))


def adf(x: np.ndarray, lags: int | None = None) -> AdfResult:
    """Augmented Dickey-Fuller regression with constant and trend."""
    y = np.asarray(x, dtype=np.float64)
    if y.size < 50:
        raise UndefinedDiagnosticError(f"ADF needs at least 50 points, got {y.size}")
    p = schwert_lags(y.size) if lags is None else lags
    dy = np.diff(y)
    rows = np.arange(p, dy.size)
    if rows.size <= p + 3:
        raise UndefinedDiagnosticError("too few observations for the chosen lag order")
    columns = [np.ones(rows.size), rows.astype(np.float64), y[rows]]
    columns += [dy[rows - i] for i in range(1, p + 1)]
    X = np.column_stack(columns)
    target = dy[rows]
    # column scaling keeps the normal matrix well conditioned; t-stats are unaffected
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    if np.linalg.matrix_rank(Xs) < Xs.shape[1]:
        raise NumericError("singular ADF regression matrix")
    coef, *_ = np.linalg.lstsq(Xs, target, rcond=None)
    resid = target - Xs @ coef
    dof = rows.size - Xs.shape[1]
    sigma2 = float(resid @ resid) / dof
    if sigma2 <= 0:
        raise UndefinedDiagnosticError("ADF regression has a perfect fit")
    cov = sigma2 * np.linalg.inv(Xs.T @ Xs)
    stat = float(coef[2] / math.sqrt(cov[2, 2]))
    return AdfResult(stat, df_trend_pvalue(stat, rows.size), p, rows.size)


def adf_test(x: np.ndarray) -> float:
    return adf(x).p_value


# --------------------------------------------------------------------------- reports


@dataclass
class DiagnosticsReport:
    name: str
    channels: list[str]
    adf_p: list[float]
    spectral_entropy: list[float]
    vov: list[float]
    window: int
    excluded: dict[str, int] = field(default_factory=dict)
    rank_hs: int | None = None
    rank_vov: int | None = None
    score: int | None = None

    def average(self, metric: str) -> float:
        vals = np.asarray(getattr(self, metric), dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    @property
    def mean_adf_p(self) -> float:
        return self.average("adf_p")

    @property
    def mean_spectral_entropy(self) -> float:
        return self.average("spectral_entropy")

    @property
    def mean_vov(self) -> float:
        return self.average("vov")


def sample_channels(n_channels: int, cap: int = MAX_CHANNELS) -> np.ndarray:
    if n_channels <= cap:
        return np.arange(n_channels)
    return np.unique(np.linspace(0, n_channels - 1, cap).round().astype(int))


def diagnose_frame(frame: SeriesFrame, name: str = "series", window: int | None = None) -> DiagnosticsReport:
    ppd = frame.meta.get("points_per_day")
    window = window or vov_window(ppd)
    chosen = sample_channels(frame.n_channels)
    metrics = {"adf_p": [], "spectral_entropy": [], "vov": []}
    excluded = {k: 0 for k in metrics}
    funcs = {"adf_p": adf_test, "spectral_entropy": spectral_entropy, "vov": lambda z: vov(z, window)}
    for c in chosen:
        col = frame.values[:, c]
        try:
            z = znormalize(col)
        except UndefinedDiagnosticError:
            z = None
        for metric, fn in funcs.items():
            try:
                if z is None:
                    raise UndefinedDiagnosticError("constant channel")
                metrics[metric].append(fn(z))
            except (UndefinedDiagnosticError, NumericError):
                metrics[metric].append(float("nan"))
                excluded[metric] += 1
    names = [frame.channel_names[c] for c in chosen]
    return DiagnosticsReport(name, names, metrics["adf_p"], metrics["spectral_entropy"], metrics["vov"], window, excluded)


def competition_rank(values) -> list[int]:
    """Ascending ranks (1 = lowest); ties share the lower rank and the next rank skips."""
    arr = np.asarray(values, dtype=np.float64)
    return [int(1 + np.sum(arr < v)) for v in arr]


def composite_score(table: dict[str, tuple[float, float]]) -> dict[str, tuple[int, int, int]]:
    """Map name -> (H_s, VoV) to name -> (rank H_s, rank VoV, score)."""
    names = list(table)
    hs_ranks = competition_rank([table[n][0] for n in names])
    vov_ranks = competition_rank([table[n][1] for n in names])
    return {n: (a, b, a + b) for n, a, b in zip(names, hs_ranks, vov_ranks)}


def score_reports(reports: list[DiagnosticsReport]) -> list[DiagnosticsReport]:
    """Fill ranks and scores in place; returns reports sorted by descending score."""
    if len(reports) < 2:
        return reports
    scored = composite_score({r.name: (r.mean_spectral_entropy, r.mean_vov) for r in reports})
    for r in reports:
        r.rank_hs, r.rank_vov, r.score = scored[r.name]
    return sorted(reports, key=lambda r: -r.score)


REPORT_COLUMNS = ["dataset", "adf_p", "spectral_entropy", "vov", "rank_hs", "rank_vov", "score", "excluded"]


def _row(r: DiagnosticsReport) -> list:
    return [
        r.name,
        r.mean_adf_p,
        r.mean_spectral_entropy,
        r.mean_vov,
        r.rank_hs,
        r.rank_vov,
        r.score,
        sum(r.excluded.values()),
    ]


def reports_to_csv(reports: list[DiagnosticsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in _row(r)])
    return buf.getvalue()


def format_table(reports: list[DiagnosticsReport]) -> str:
    header = f"{'dataset':<20}{'ADF p':>10}{'H_s':>10}{'VoV':>10}{'rk(H_s)':>9}{'rk(VoV)':>9}{'Score':>7}"
    lines = [header, "-" * len(header)]
    for r in reports:
        ranks = "".join(f"{'-' if v is None else v:>9}" for v in (r.rank_hs, r.rank_vov))
        score = "-" if r.score is None else r.score
        lines.append(
            f"{r.name:<20}{r.mean_adf_p:>10.4f}{r.mean_spectral_entropy:>10.4f}{r.mean_vov:>10.4f}{ranks}{score:>7}"
        )
    notes = [f"{r.name}: {n} undefined channel metric(s) excluded" for r in reports if (n := sum(r.excluded.values()))]
    if notes:
        lines.append("")
        lines.extend(f"* {n}" for n in notes)
    return "\n".join(lines)
