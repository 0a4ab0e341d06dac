import os
import tempfile

import pandas as pd
import pytest
from jinja2 import DictLoader, Environment

from iadalab import reports


@pytest.fixture
def tmp_output_dir():
    """Temporary directory for reports and figures."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


@pytest.fixture
def template_env():
    """In-memory template so the tests never depend on the packaged file."""
    return Environment(loader=DictLoader({
        "report_template.html": "<html>{{ title }} | rows={{ summary_rows|length }} | sweep={{ sweep|length }} "
                                "| checks={% for c in checks %}{{ c.name }};{% endfor %} "
                                "| plots={% for p in plots %}{{ p }};{% endfor %}</html>",
    }))


def _metrics():
    return pd.DataFrame({"seed": [0, 0, 1, 1], "iteration": [10, 10, 10, 10],
                         "split": ["source_val", "target"] * 2, "auc": [0.9, 0.8, 0.7, 0.6],
                         "macro_f1": [0.5] * 4})


def _summary():
    return pd.DataFrame([
        {"seed": 0, "split": "target", "accuracy": 0.95, "auc": 0.85, "f1": 0.75, "precision": 0.65,
         "recall": 0.55, "macro_f1": None},
        {"seed": "cv_percent", "split": "target", "accuracy": 12.5, "auc": 3.0, "f1": 1.0, "precision": 2.0,
         "recall": 4.0, "macro_f1": 0.0},
    ])


# ---------------------------
# get_color_for_score
# ---------------------------

@pytest.mark.parametrize("value,expected", [
    (None, "#808080"),          # None -> grey
    (float("nan"), "#808080"),
    ("abc", "#808080"),         # invalid -> grey
    (0.95, "#28a745"),
    (0.85, "#90ee90"),
    (0.75, "#ffc107"),
    (0.65, "#fd7e14"),
    (0.30, "#dc3545"),
])
def test_get_color_for_score_cases(value, expected):
    assert reports.get_color_for_score(value) == expected


# ---------------------------
# format_float_field
# ---------------------------

def test_format_float_field_special_cases():
    assert reports.format_float_field(None) == "N/A"
    assert reports.format_float_field(float("nan")) == "N/A"
    assert reports.format_float_field("N/A") == "N/A"
    assert reports.format_float_field("   ") == "N/A"


def test_format_float_field_valid_and_invalid():
    assert reports.format_float_field(0.123456) == "0.1235"
    assert reports.format_float_field("42", ".2f") == "42.00"
    assert reports.format_float_field("mean") == "mean"


# ---------------------------
# plots
# ---------------------------

def test_plot_training_curves(tmp_output_dir):
    result = reports.plot_training_curves(_metrics(), tmp_output_dir, "auc")
    assert result == "training_auc.png"
    assert os.path.exists(os.path.join(tmp_output_dir, result))


def test_plot_training_curves_missing_metric(tmp_output_dir, caplog):
    caplog.set_level("ERROR")
    assert reports.plot_training_curves(_metrics(), tmp_output_dir, "accuracy") is None
    assert "Error plotting training curves" in caplog.text


def test_plot_sweep(tmp_output_dir):
    sweep = pd.DataFrame({"axis": ["lambda_reg"] * 2, "value": [1e-3, 1e-2], "auc_mean": [0.8, 0.7],
                          "auc_cv_percent": [1.0, None], "macro_f1_mean": [0.6, 0.5]})
    assert reports.plot_sweep(sweep, tmp_output_dir) == "sweep_auc.png"


def test_plot_convergence(tmp_output_dir):
    trajectory = pd.DataFrame({"t": [1, 10, 100], "mean_suboptimality": [1.0, 0.1, 0.01],
                               "bound": [5.0, 0.5, 0.05]})
    assert reports.plot_convergence(trajectory, os.path.join(tmp_output_dir, "figures")) == "convergence.png"


# ---------------------------
# build_report
# ---------------------------

def test_summary_rows_colors_metrics_not_cv():
    rows = reports._summary_rows(_summary())
    assert rows[0]["cells"][0] == {"text": "0.9500", "color": "#28a745"}
    assert rows[0]["cells"][-1]["text"] == "N/A"
    assert rows[1]["cells"][0] == {"text": "12.50", "color": "#ffffff"}


def test_build_report_collects_outputs(tmp_output_dir, template_env):
    _metrics().to_csv(os.path.join(tmp_output_dir, "metrics.csv"), index=False)
    _summary().to_csv(os.path.join(tmp_output_dir, "summary.csv"), index=False)
    with open(os.path.join(tmp_output_dir, "theory_alloc.txt"), "w") as f:
        f.write("alloc: PASS\nB = 100\n")
    path = reports.build_report(tmp_output_dir, template_env=template_env)
    assert path == os.path.join(tmp_output_dir, "report.html")
    with open(path) as f:
        html = f.read()
    assert "rows=2" in html
    assert "sweep=0" in html
    assert "checks=alloc;" in html
    assert "figures/training_auc.png;figures/training_macro_f1.png;" in html


def test_build_report_empty_directory(tmp_output_dir):
    path = reports.build_report(tmp_output_dir)
    with open(path) as f:
        assert "No results found" in f.read()


def test_build_report_skips_unreadable_csv(tmp_output_dir, template_env, caplog):
    caplog.set_level("WARNING")
    open(os.path.join(tmp_output_dir, "sweep.csv"), "w").close()
    assert reports.build_report(tmp_output_dir, template_env=template_env) is not None
    assert "Skipping unreadable" in caplog.text


def test_build_report_template_failure(tmp_output_dir, caplog):
    caplog.set_level("ERROR")
    broken = Environment(loader=DictLoader({"report_template.html": "{{ missing.attribute.call() }}"}))
    assert reports.build_report(tmp_output_dir, template_env=broken) is None
    assert "Error generating HTML report" in caplog.text
