"""Static report rendering: one PNG per experiment plus a text summary.

Reads results.csv (and the sidecar CSVs) from a run directory and writes
plots into <out>/plots/. Figures are deliberately plain matplotlib:
rq1 box-and-mean summaries per capacity tier, rq2 scatter with the fitted
log curve, rq3 success-vs-eps lines per algorithm, rq4 grouped bars for
trained vs blind.
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from fractions import Fraction

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError  # noqa: E402
from .evaluation import fit_log_trend, read_results_csv  # noqa: E402
from .student import TIER_ORDER, find_architecture  # noqa: E402

_TIER_LABELS = {"deep": "deep (largest)", "residual": "residual", "dense": "dense",
                "compact": "compact (smallest)"}


def _load_run(out_dir):
    results_path = os.path.join(out_dir, "results.csv")
    if not os.path.exists(results_path):
        raise DataError(f"missing results CSV at {results_path}")
    rows = read_results_csv(results_path)
    if not rows:
        raise DataError(f"results CSV at {results_path} has no data rows")
    run_json = os.path.join(out_dir, "run.json")
    experiment_id = "single"
    if os.path.exists(run_json):
        with open(run_json, encoding="utf-8") as fh:
            experiment_id = json.load(fh).get("experiment_id", "single")
    return experiment_id, rows


def _p(row):
    return int(row["Q"]) / int(row["T"])


def _read_students_csv(out_dir):
    path = os.path.join(out_dir, "students.csv")
    if not os.path.exists(path):
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _plot_rq1(rows, plots_dir, summary):
    by_variant = defaultdict(list)
    for row in rows:
        by_variant[row["student_arch"]].append(_p(row))
    by_tier = defaultdict(list)
    for variant, ps in by_variant.items():
        by_tier[find_architecture(variant).family].extend(ps)
    tiers = [t for t in TIER_ORDER if t in by_tier]
    data = [by_tier[t] for t in tiers]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.boxplot(data, orientation="horizontal", showmeans=True,
               tick_labels=[_TIER_LABELS[t] for t in tiers])
    ax.set_xlabel("attack success rate")
    ax.set_title("Transfer success by student capacity tier")
    fig.tight_layout()
    path = os.path.join(plots_dir, "rq1_tiers.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    summary.append("per-tier attack success (mean / min / max):")
    for t in tiers:
        ps = by_tier[t]
        summary.append(f"  {t:9s} {sum(ps) / len(ps):.4f} / {min(ps):.4f} / {max(ps):.4f}")
    return [path], None


def _plot_rq2(rows, students, plots_dir, summary):
    trained = [(float(r["dataset_fraction"]) * 100.0, _p(r)) for r in rows
               if r["blind"] != "true"]
    blind = [(0.0, _p(r)) for r in rows if r["blind"] == "true"]
    fit = fit_log_trend(trained) if len(trained) >= 4 else None

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.scatter([x for x, _ in trained], [y for _, y in trained], color="black",
               label="trained student", zorder=3)
    if blind:
        ax.scatter([x for x, _ in blind], [y for _, y in blind], color="tab:blue",
                   marker="s", label="blind baseline", zorder=3)
    if fit is not None:
        xs = np.linspace(min(x for x, _ in trained), max(x for x, _ in trained), 200)
        ax.plot(xs, fit.predict(xs), color="tab:red",
                label=f"y = {fit.a:.3f} ln({fit.b:.3f} + x) + {fit.c:.3f}")
    ax.set_xlabel("teaching dataset size (% of full training split)")
    ax.set_ylabel("attack success rate")
    ax.set_title("Transfer success vs teaching dataset size")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(plots_dir, "rq2_success.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths = [path]

    if students:
        pts = sorted((float(s["dataset_fraction"]) * 100.0, float(s["test_accuracy"]))
                     for s in students)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.scatter([x for x, _ in pts], [y for _, y in pts], color="black")
        ax.set_xlabel("teaching dataset size (% of full training split)")
        ax.set_ylabel("student accuracy vs oracle labels")
        ax.set_title("Student imitation accuracy vs teaching dataset size")
        fig.tight_layout()
        acc_path = os.path.join(plots_dir, "rq2_accuracy.png")
        fig.savefig(acc_path, dpi=150)
        plt.close(fig)
        paths.append(acc_path)

    if fit is not None:
        summary.append(f"log trend fit: a={fit.a:.6f} b={fit.b:.6f} c={fit.c:.6f} "
                       f"rss={fit.rss:.6e}")
    return paths, fit


def _plot_rq3(rows, plots_dir, summary):
    acc = defaultdict(list)
    eps_labels = []
    for row in rows:
        if row["eps"] not in eps_labels:
            eps_labels.append(row["eps"])
        acc[(row["algorithm"], row["eps"])].append(_p(row))
    eps_labels.sort(key=lambda e: float(Fraction(e)))
    algorithms = sorted({row["algorithm"] for row in rows})
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    for algo in algorithms:
        ys = [sum(acc[(algo, e)]) / len(acc[(algo, e)]) for e in eps_labels]
        ax.plot(range(len(eps_labels)), ys, marker="o", label=algo)
    ax.set_xticks(range(len(eps_labels)), eps_labels)
    ax.set_xlabel("eps")
    ax.set_ylabel("attack success rate")
    ax.set_title("Transfer success vs perturbation budget")
    ax.legend(ncols=2)
    fig.tight_layout()
    path = os.path.join(plots_dir, "rq3_eps.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    summary.append("mean success rate per algorithm at the largest eps:")
    top = eps_labels[-1]
    for algo in algorithms:
        ys = acc[(algo, top)]
        summary.append(f"  {algo:7s} @ {top}: {sum(ys) / len(ys):.4f}")
    return [path], None


def _plot_rq4(rows, plots_dir, summary):
    seeds = []
    trained, blind = {}, {}
    for row in rows:
        seed = row["run_id"].rsplit("-s", 1)[-1]
        if seed not in seeds:
            seeds.append(seed)
        (blind if row["blind"] == "true" else trained)[seed] = _p(row)
    fig, ax = plt.subplots(figsize=(6.5, 4))
    width = 0.38
    xs = range(len(seeds))
    ax.bar([x - width / 2 for x in xs], [trained.get(s, 0.0) for s in seeds], width,
           label="trained student")
    ax.bar([x + width / 2 for x in xs], [blind.get(s, 0.0) for s in seeds], width,
           label="blind baseline")
    ax.set_xticks(list(xs), [f"seed {s}" for s in seeds])
    ax.set_ylabel("attack success rate")
    ax.set_title("Trained substitute vs blind baseline")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(plots_dir, "rq4_bars.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    t_vals, b_vals = list(trained.values()), list(blind.values())
    if t_vals and b_vals:
        tm, bm = sum(t_vals) / len(t_vals), sum(b_vals) / len(b_vals)
        ratio = tm / bm if bm > 0 else float("inf")
        summary.append(f"mean trained p={tm:.4f}, mean blind p={bm:.4f}, ratio={ratio:.2f}")
    return [path], None


def emit_report(out_dir):
    """Render plots + summary for a finished run; returns artifact paths and fit.

    Raises DataError (no files written) when results.csv is absent or empty.
    """
    experiment_id, rows = _load_run(out_dir)
    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    summary = [f"experiment: {experiment_id}", f"rows: {len(rows)}"]

    fit = None
    if experiment_id == "rq1":
        plots, fit = _plot_rq1(rows, plots_dir, summary)
    elif experiment_id == "rq2":
        plots, fit = _plot_rq2(rows, _read_students_csv(out_dir), plots_dir, summary)
    elif experiment_id == "rq3":
        plots, fit = _plot_rq3(rows, plots_dir, summary)
    elif experiment_id == "rq4":
        plots, fit = _plot_rq4(rows, plots_dir, summary)
    else:
        plots = []
        for row in rows:
            summary.append(
                f"{row['algorithm']} eps={row['eps']} arch={row['student_arch']}: "
                f"p={row['p']} (Q={row['Q']}, T={row['T']}, M={row['M']})"
            )

    stats_path = os.path.join(out_dir, "attack_stats.csv")
    if os.path.exists(stats_path):
        with open(stats_path, newline="", encoding="utf-8") as fh:
            stats = list(csv.DictReader(fh))
        if stats:
            mean_linf = sum(float(s["mean_linf"]) for s in stats) / len(stats)
            mean_abs = sum(float(s["mean_abs_perturbation"]) for s in stats) / len(stats)
            summary.append(f"perturbation size: mean achieved Linf {mean_linf:.6f}, "
                           f"mean |delta| {mean_abs:.6f}")

    summary_path = os.path.join(plots_dir, "summary.txt")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    return {"plots": plots, "summary": summary_path, "fit": fit}
