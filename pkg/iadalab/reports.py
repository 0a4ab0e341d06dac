import matplotlib
matplotlib.use("Agg")  # non-interactive backend

import logging
import os

import matplotlib.pyplot as plt
import pandas as pd
from jinja2 import Environment, FileSystemLoader, select_autoescape

from iadalab.domains import ensure_dir

logger = logging.getLogger(__name__)

TEMPLATES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")
SUMMARY_METRICS = ("accuracy", "auc", "f1", "precision", "recall", "macro_f1")


def get_color_for_score(score):
    """Hex color for a metric in [0, 1], green for high and red for low.

    Args:
        score (float or None): The metric value. None, NaN and unconvertible
                               values map to grey.

    Returns:
        str: Hex color code.
    """
    if score is None or pd.isna(score):
        return "#808080"
    try:
        percentage = 100.0 * float(score)
    except (ValueError, TypeError):
        return "#808080"

    if percentage >= 90:
        return "#28a745"
    elif percentage >= 80:
        return "#90ee90"
    elif percentage >= 70:
        return "#ffc107"
    elif percentage >= 60:
        return "#fd7e14"
    else:
        return "#dc3545"


def format_float_field(value, precision=".4f"):
    """Formats a value as a float string, or returns "N/A" for missing values.

    Args:
        value (any): The value to format.
        precision (str): Format spec, e.g. ".4f".

    Returns:
        str: The formatted value, "N/A", or ``str(value)`` if it is not numeric.
    """
    if value is None or pd.isna(value) or str(value).strip() in ("", "N/A"):
        return "N/A"
    try:
        return f"{float(str(value)):{precision}}"
    except (ValueError, TypeError):
        return str(value)


# --- PLOTS ---
def plot_training_curves(metrics, output_path, metric="auc"):
    """Plots the seed-mean of ``metric`` per split against the iteration.

    Returns:
        str or None: The plot filename if saved, None otherwise.
    """
    ensure_dir(output_path)
    plot_filename = f"training_{metric}.png"
    full_plot_path = os.path.join(output_path, plot_filename)
    try:
        fig, ax = plt.subplots(figsize=(8, 4))
        for split, group in metrics.groupby("split", sort=True):
            curve = group.groupby("iteration")[metric].mean()
            ax.plot(curve.index.to_numpy(), curve.to_numpy(), marker="o", label=split)
        ax.set_xlabel("Iteration")
        ax.set_ylabel(metric)
        ax.set_title(f"Seed-mean {metric} during training")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right")
        plt.tight_layout()
        plt.savefig(full_plot_path)
        plt.close(fig)
        logger.info(f"Training curve saved to {full_plot_path}")
        return plot_filename
    except Exception as e:
        logger.error(f"Error plotting training curves: {e}", exc_info=True)
        return None


def plot_sweep(sweep, output_path):
    """Target AUC against the swept weight on a log axis, with %CV error bars."""
    ensure_dir(output_path)
    plot_filename = "sweep_auc.png"
    full_plot_path = os.path.join(output_path, plot_filename)
    try:
        fig, ax = plt.subplots(figsize=(6, 4))
        spread = sweep["auc_mean"] * sweep["auc_cv_percent"].fillna(0.0) / 100.0
        ax.errorbar(sweep["value"].to_numpy(), sweep["auc_mean"].to_numpy(), yerr=spread.to_numpy(),
                    marker="o", capsize=3)
        ax.set_xscale("log")
        axis = sweep["axis"].iloc[0] if "axis" in sweep.columns and len(sweep) else "value"
        ax.set_xlabel(axis)
        ax.set_ylabel("Target AUC (seed mean)")
        ax.set_title(f"Sweep over {axis}")
        ax.grid(True, alpha=0.3)
        plt.tight_layout()
        plt.savefig(full_plot_path)
        plt.close(fig)
        return plot_filename
    except Exception as e:
        logger.error(f"Error plotting sweep: {e}", exc_info=True)
        return None


def plot_convergence(trajectory, output_path):
    """Mean suboptimality and the convergence bound on log-log axes."""
    ensure_dir(output_path)
    plot_filename = "convergence.png"
    full_plot_path = os.path.join(output_path, plot_filename)
    try:
        fig, ax = plt.subplots(figsize=(6, 4))
        t = trajectory["t"].to_numpy()
        ax.plot(t, trajectory["mean_suboptimality"].to_numpy(), label="mean suboptimality")
        ax.plot(t, trajectory["bound"].to_numpy(), linestyle="--", label="bound")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_title("SGD suboptimality against the bound")
        ax.legend(loc="upper right")
        plt.tight_layout()
        plt.savefig(full_plot_path)
        plt.close(fig)
        return plot_filename
    except Exception as e:
        logger.error(f"Error plotting convergence: {e}", exc_info=True)
        return None


# --- HTML ---
def _summary_rows(summary):
    rows = []
    for record in summary.to_dict(orient="records"):
        is_cv = str(record["seed"]) == "cv_percent"
        cells = []
        for metric in SUMMARY_METRICS:
            value = record.get(metric)
            cells.append({"text": format_float_field(value, ".2f" if is_cv else ".4f"),
                          "color": "#ffffff" if is_cv else get_color_for_score(value)})
        rows.append({"seed": record["seed"], "split": record["split"], "cells": cells})
    return rows


def _read_csv(path):
    if not os.path.exists(path):
        return None
    try:
        return pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.warning(f"Skipping unreadable {path}: {e}")
        return None


def build_report(out_dir, template_env=None):
    """Renders ``report.html`` (and its figures) from the CSVs found in ``out_dir``.

    Looks for metrics.csv, summary.csv, sweep.csv, ablation.csv and the
    theory_*.csv / theory_*.txt outputs; any of them may be absent.

    Returns:
        str or None: Path of the written report, None on failure.
    """
    if template_env is None:
        template_env = Environment(loader=FileSystemLoader(TEMPLATES_DIR),
                                   autoescape=select_autoescape(["html", "xml"]))
    figures_dir = os.path.join(out_dir, "figures")
    plots = []
    metrics = _read_csv(os.path.join(out_dir, "metrics.csv"))
    if metrics is not None and len(metrics):
        for metric in ("auc", "macro_f1"):
            name = plot_training_curves(metrics, figures_dir, metric)
            if name:
                plots.append(f"figures/{name}")
    sweep = _read_csv(os.path.join(out_dir, "sweep.csv"))
    if sweep is not None and len(sweep):
        name = plot_sweep(sweep, figures_dir)
        if name:
            plots.append(f"figures/{name}")
    trajectory = _read_csv(os.path.join(out_dir, "theory_convergence.csv"))
    if trajectory is not None and len(trajectory):
        name = plot_convergence(trajectory, figures_dir)
        if name:
            plots.append(f"figures/{name}")

    summary = _read_csv(os.path.join(out_dir, "summary.csv"))
    ablation = _read_csv(os.path.join(out_dir, "ablation.csv"))
    checks = []
    for filename in sorted(os.listdir(out_dir)):
        if filename.startswith("theory_") and filename.endswith(".txt"):
            with open(os.path.join(out_dir, filename), encoding="utf-8") as f:
                checks.append({"name": filename[len("theory_"):-len(".txt")], "text": f.read().strip()})

    report_path = os.path.join(out_dir, "report.html")
    try:
        template = template_env.get_template("report_template.html")
        context = {
            "title": os.path.basename(os.path.abspath(out_dir)),
            "metrics": list(SUMMARY_METRICS),
            "summary_rows": _summary_rows(summary) if summary is not None else [],
            "sweep": sweep.to_dict(orient="records") if sweep is not None else [],
            "ablation": ablation.to_dict(orient="records") if ablation is not None else [],
            "checks": checks,
            "plots": plots,
            "fmt": format_float_field,
        }
        with open(report_path, "w", encoding="utf-8") as f:
            f.write(template.render(context))
        logger.info(f"HTML report saved to {report_path}")
        return report_path
    except Exception as e:
        logger.error(f"Error generating HTML report in {out_dir}: {e}", exc_info=True)
        return None
