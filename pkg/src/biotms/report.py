"""Post-processing of a sweep run: grouped error tables and figures.

Reads the per-cell time series and the endpoint table a sweep wrote and
renders paper-style artifacts under ``<run>/report/``: one grouped CSV
table per oversampling level, error-over-time curves per metric, and an
endpoint error-vs-dimension plot.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

METRICS = ("l2_p", "h1_p", "l2_u", "h1_u")
METRIC_LABELS = {
    "l2_p": "weighted $L^2$ pressure error",
    "h1_p": "weighted $H^1$ pressure error",
    "l2_u": "weighted $L^2$ displacement error",
    "h1_u": "energy displacement error",
}


class ReportError(RuntimeError):
    pass


def _read_endpoint(run_dir: Path) -> list[dict]:
    path = run_dir / "errors_endpoint.csv"
    if not path.exists():
        raise ReportError(f"no endpoint table found at {path}")
    with open(path) as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for key in ("oversample_t", "noff_p", "noff_u", "dim"):
            row[key] = int(row[key])
        for key in row:
            if key.startswith(("l2", "h1")):
                row[key] = float(row[key])
    return rows


def _read_cell_series(run_dir: Path, t: int, noff_p: int, noff_u: int) -> dict:
    path = run_dir / f"cell_t{t}_p{noff_p}_u{noff_u}.csv"
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {key: [float(r[key]) for r in rows] for key in rows[0]}


def write_grouped_table(rows: list[dict], t: int, path: Path) -> None:
    """Paper-shaped table: N_off^p rows inside N_off^u groups, one t level."""
    sub = [r for r in rows if r["oversample_t"] == t]
    with open(path, "w") as f:
        f.write("noff_u,noff_p,dim,l2_p,h1_p,l2_u,h1_u\n")
        for noff_u in sorted({r["noff_u"] for r in sub}):
            group = sorted((r for r in sub if r["noff_u"] == noff_u),
                           key=lambda r: r["noff_p"])
            for r in group:
                f.write(f"{noff_u},{r['noff_p']},{r['dim']},"
                        + ",".join(f"{r[m]:.17g}" for m in METRICS) + "\n")


def plot_errors_over_time(run_dir: Path, rows: list[dict], t: int, out_dir: Path) -> list[Path]:
    """One figure per metric: relative error vs time, one curve per N_off."""
    diag = sorted((r for r in rows
                   if r["oversample_t"] == t and r["noff_p"] == r["noff_u"]),
                  key=lambda r: r["noff_p"])
    written = []
    for metric in METRICS:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for r in diag:
            series = _read_cell_series(run_dir, t, r["noff_p"], r["noff_u"])
            ax.semilogy(series["time"], series[metric],
                        marker="o", markersize=3,
                        label=f"$N_{{off}}$ = {r['noff_p']}")
        ax.set_xlabel("time")
        ax.set_ylabel(METRIC_LABELS[metric])
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"errors_over_time_{metric}_t{t}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def plot_endpoint_vs_dim(rows: list[dict], t: int, out_dir: Path) -> Path:
    diag = sorted((r for r in rows
                   if r["oversample_t"] == t and r["noff_p"] == r["noff_u"]),
                  key=lambda r: r["dim"])
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for metric in METRICS:
        ax.semilogy([r["dim"] for r in diag], [r[metric] for r in diag],
                    marker="s", markersize=4, label=METRIC_LABELS[metric])
    ax.set_xlabel("offline space dimension")
    ax.set_ylabel("relative error at final time")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = out_dir / f"endpoint_vs_dim_t{t}.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def generate(run_dir) -> Path:
    """Render tables and figures for a finished sweep run."""
    run_dir = Path(run_dir)
    rows = _read_endpoint(run_dir)
    out_dir = run_dir / "report"
    out_dir.mkdir(exist_ok=True)
    levels = sorted({r["oversample_t"] for r in rows})
    for t in levels:
        write_grouped_table(rows, t, out_dir / f"table_t{t}.csv")
        if any(r["noff_p"] == r["noff_u"] for r in rows if r["oversample_t"] == t):
            plot_errors_over_time(run_dir, rows, t, out_dir)
            plot_endpoint_vs_dim(rows, t, out_dir)
    return out_dir
