"""Plot-ready CSVs and static SVG charts from a completed study directory.

SVG output is byte-deterministic: fixed hash salt, no date metadata.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .studies import MANIFEST  # noqa: E402


class MissingArtifact(FileNotFoundError):
    def __init__(self, directory, name):
        self.name = name
        super().__init__(f"missing artifact {name!r} in {directory}")


def _read_csv(d: Path, name: str):
    path = d / name
    if not path.exists():
        raise MissingArtifact(d, name)
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write_csv(path: Path, header, rows):
    fh = io.StringIO()
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(fh.getvalue())


def _save(fig, path: Path):
    with matplotlib.rc_context({"svg.hashsalt": "vortexlab", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _convergence(d: Path):
    rows = _read_csv(d, "errors.csv")
    summary_path = d / "summary.json"
    if not summary_path.exists():
        raise MissingArtifact(d, "summary.json")
    summary = json.loads(summary_path.read_text())
    by_n: dict[int, list] = {}
    for r in rows:
        by_n.setdefault(int(r["N"]), []).append(float(r["l1_error"]))
    Ns = sorted(by_n)
    mean = np.array([np.mean(by_n[N]) for N in Ns])
    se = np.array([np.std(by_n[N], ddof=1) / np.sqrt(len(by_n[N])) if len(by_n[N]) > 1 else 0.0
                   for N in Ns])
    _write_csv(d / "plot_convergence.csv", ["N", "mean_l1_error", "stderr"], zip(Ns, mean, se))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(Ns, mean, yerr=se, fmt="o-", capsize=3, label="smoothed L1 error")
    slope = summary["slope"]
    ref = mean[0] * (np.asarray(Ns, float) / Ns[0]) ** slope
    ax.plot(Ns, ref, "--", color="gray", label=f"fit slope {slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("L1 error")
    lo, hi = summary["ci"]
    ax.annotate(f"slope {slope:.3f}  95% CI [{lo:.3f}, {hi:.3f}]", xy=(0.05, 0.05),
                xycoords="axes fraction")
    ax.legend()
    _save(fig, d / "convergence.svg")
    return ["plot_convergence.csv", "convergence.svg"]


def _regularity(d: Path):
    rows = _read_csv(d, "envelope_ratios.csv")
    series: dict[str, list] = {}
    for r in rows:
        series.setdefault(r["quantity"], []).append((float(r["t"]), float(r["value"])))
    _write_csv(d / "plot_envelopes.csv", ["quantity", "t", "value"],
               [(q, t, v) for q in sorted(series) for t, v in series[q]])
    fig, ax = plt.subplots(figsize=(5, 4))
    for q in sorted(series):
        t, v = np.array(series[q]).T
        ax.plot(1 + t, v, "o-", label=q)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("1 + t")
    ax.set_ylabel("scaled quantity")
    ax.legend(fontsize="small")
    _save(fig, d / "envelopes.svg")
    return ["plot_envelopes.csv", "envelopes.svg"]


def _hierarchy(d: Path):
    rows = _read_csv(d, "hierarchy.csv")
    ts = sorted({float(r["t"]) for r in rows})
    ks = sorted({int(r["k"]) for r in rows})
    ti = {t: i for i, t in enumerate(ts)}
    x = np.zeros((len(ts), len(ks)))
    for r in rows:
        x[ti[float(r["t"])], int(r["k"]) - 1] = float(r["x_k"])
    _write_csv(d / "plot_hierarchy.csv", ["t", "k", "log10_x_k"],
               [(t, k, float(np.log10(max(x[i, k - 1], 1e-300)))) for i, t in enumerate(ts) for k in ks])
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(np.log10(np.maximum(x.T, 1e-300)), origin="lower", aspect="auto",
                   extent=(ts[0], ts[-1], ks[0] - 0.5, ks[-1] + 0.5), cmap="viridis")
    fig.colorbar(im, ax=ax, label="log10 x_k(t)")
    ax.set_xlabel("t")
    ax.set_ylabel("k")
    _save(fig, d / "hierarchy.svg")
    return ["plot_hierarchy.csv", "hierarchy.svg"]


def _lamb_oseen(d: Path):
    rows = _read_csv(d, "errors.csv")
    t = [float(r["t"]) for r in rows]
    e = [float(r["max_rel_error"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.semilogy(t, e, "o-")
    ax.set_xlabel("t")
    ax.set_ylabel("max relative error")
    _save(fig, d / "lamb_oseen.svg")
    return ["lamb_oseen.svg"]


def _concentration(d: Path):
    rows = _read_csv(d, "estimates.csv")
    fig, ax = plt.subplots(figsize=(5, 4))
    keys = sorted({(r["series"], r["form"]) for r in rows})
    for s, f in keys:
        sel = [r for r in rows if r["series"] == s and r["form"] == f]
        N = [int(r["N"]) for r in sel]
        ax.errorbar(N, [float(r["log_moment"]) for r in sel], yerr=[3 * float(r["stderr"]) for r in sel],
                    fmt="o-", capsize=3, label=f"{s} {f}")
    ax.set_xscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("log E exp(X_N)")
    ax.legend(fontsize="small")
    _save(fig, d / "concentration.svg")
    return ["concentration.svg"]


def _simulate(d: Path):
    rows = _read_csv(d, "trajectory_000.csv")
    last = max(int(r["step"]) for r in rows)
    sel = [r for r in rows if int(r["step"]) == last]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    m = np.array([float(r["m"]) for r in sel])
    ax.scatter([float(r["x1"]) for r in sel], [float(r["x2"]) for r in sel], c=m, s=4, cmap="coolwarm")
    ax.set_aspect("equal")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    _save(fig, d / "particles.svg")
    return ["particles.svg"]


PLOTTERS = {
    "convergence": _convergence,
    "regularity": _regularity,
    "hierarchy_cert": _hierarchy,
    "lamb_oseen": _lamb_oseen,
    "concentration": _concentration,
    "simulate": _simulate,
}


def emit_plotdata(artifact_dir) -> list[str]:
    """Write plot CSVs and SVGs for the study in ``artifact_dir``; returns file names."""
    d = Path(artifact_dir)
    if not (d / MANIFEST).exists():
        raise MissingArtifact(d, MANIFEST)
    man = json.loads((d / MANIFEST).read_text())
    if man.get("status") == "failed":
        raise MissingArtifact(d, "completed study (run marked FAILED)")
    return PLOTTERS[man["study"]](d)
