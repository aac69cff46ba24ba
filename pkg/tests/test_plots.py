import numpy as np

from greenwave.plots import (save_attention_bars, save_loss_curve,
                             save_travel_time_bars)


def test_travel_time_bars_written(tmp_path):
    rows = [{"method": "fixed_time", "att_mean": 120.7, "att_std": 3.2},
            {"method": "max_pressure", "att_mean": 87.8, "att_std": 2.1}]
    path = tmp_path / "att.png"
    save_travel_time_bars(rows, str(path))
    assert path.stat().st_size > 0


def test_loss_curve_written(tmp_path):
    steps = [{"step": i, "loss": 1.5 * 0.99 ** i} for i in range(40)]
    epochs = [{"epoch": e, "loss": 1.4 * 0.8 ** e} for e in range(4)]
    path = tmp_path / "loss.png"
    save_loss_curve(steps, epochs, str(path))
    assert path.stat().st_size > 0


def test_loss_curve_handles_empty_log(tmp_path):
    path = tmp_path / "loss.png"
    save_loss_curve([], [], str(path))
    assert path.stat().st_size > 0


def test_attention_bars_handle_nan_std(tmp_path):
    rows = [{"class": "self", "mean": 0.42, "std": 0.05},
            {"class": "1-hop", "mean": 0.38, "std": float("nan")}]
    path = tmp_path / "attention.png"
    save_attention_bars(rows, str(path))
    assert path.stat().st_size > 0
