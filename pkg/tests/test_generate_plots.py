import numpy as np
import pandas as pd

from generate_plots import plot_experiment, plot_similarity, plot_trace
from harness import METRICS_COLUMNS
from main import trace_frame


def test_plot_trace(tmp_path):
    path = tmp_path / "nested" / "trace.svg"
    plot_trace(trace_frame([1.0, 0.515625, 1.0], [-2.40625, -0.001678466796875, -2.296875]), str(path))
    assert "<svg" in path.read_text()


def test_plot_similarity(tmp_path):
    path = tmp_path / "sim.svg"
    plot_similarity(np.eye(4), str(path))
    assert path.stat().st_size > 0


def test_plot_experiment(tmp_path):
    rows = [[arm, step, 1.0, 0.1, 0.1 * (step + 1), 1.0, 1.0, 1.0] for arm in ("lp", "stabilized_lp") for step in range(3)]
    paths = plot_experiment(pd.DataFrame(rows, columns=METRICS_COLUMNS), str(tmp_path))
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["bias_cumsum.svg", "norm_W_Q.svg"]
    assert all((tmp_path / name).exists() for name in ("bias_cumsum.svg", "norm_W_Q.svg"))
