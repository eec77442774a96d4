import numpy as np
import pytest

from foveal_mim.evaluation import write_metrics
from foveal_mim.plots import MissingSeriesError, accuracy_bars, collect_series, emit_plots, epoch_curves, preview_panel


def _run(tmp_path, name, accs_by_epoch):
    d = tmp_path / name
    rows = [{"checkpoint_epoch": e, "seed": s, "test_accuracy": a, "plan_id": name}
            for e, accs in accs_by_epoch.items() for s, a in enumerate(accs)]
    write_metrics(d / "metrics.csv", rows)
    return d


def test_one_bar_per_condition_with_std_whisker(tmp_path):
    accs = [0.60, 0.61, 0.63, 0.64, 0.66]
    d = _run(tmp_path, "masked_periphery", {500: accs})
    bars = accuracy_bars(collect_series([d]), tmp_path / "bars.png")
    assert bars["names"] == ["masked_periphery"]
    assert bars["means"][0] == pytest.approx(np.mean(accs))
    assert bars["stds"][0] == pytest.approx(np.std(accs))


def test_two_runs_share_one_axis(tmp_path):
    a = _run(tmp_path, "plain", {10: [0.3], 20: [0.4]})
    b = _run(tmp_path, "foreground", {10: [0.35], 20: [0.45]})
    assert epoch_curves(collect_series([a, b]), "test_accuracy", "acc", tmp_path / "c.png") == 2
    written = emit_plots([a, b], tmp_path / "figs")
    assert sorted(p.name for p in written) == ["accuracy_bars.png", "accuracy_vs_epoch.png"]


def test_missing_run_rejected_before_writing(tmp_path):
    a = _run(tmp_path, "plain", {10: [0.3]})
    with pytest.raises(MissingSeriesError):
        emit_plots([a, tmp_path / "absent"], tmp_path / "figs")
    assert not (tmp_path / "figs").exists()


def test_preview_panel_layout():
    img = np.zeros((96, 96, 3), dtype=np.float32)
    panel = preview_panel(img, img, np.ones((96, 96)), scale=1)
    assert panel.shape == (96, 3 * 96 + 4, 3) and panel.dtype == np.uint8
    assert panel[:, -96:].min() == 255
