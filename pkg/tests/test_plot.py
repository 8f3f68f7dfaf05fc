import xml.etree.ElementTree as ET

import pytest

from ctscan_cnn.engine.plot import comparison_svg, curve_svg
from ctscan_cnn.engine.report import ReportRow
from ctscan_cnn.engine.train import EpochLog
from ctscan_cnn.errors import UsageError

NS = {"svg": "http://www.w3.org/2000/svg"}


def _logs(n):
    return [EpochLog(e, 0.5 + e / 200, 0.6, 0.5, 1.0 / e, 0.45 + e / 250, 0.55, 0.45, 1.2 / e)
            for e in range(1, n + 1)]


def test_curve_has_one_polyline_per_split():
    root = ET.fromstring(curve_svg(_logs(50), "accuracy"))
    lines = root.findall("svg:polyline", NS)
    assert [line.get("data-series") for line in lines] == ["train", "val"]
    for line in lines:
        assert len(line.get("points").split()) == 50
    texts = [t.text for t in root.findall("svg:text", NS)]
    assert "Accuracy curve" in texts and "Epoch" in texts
    assert "Training" in texts and "Validation" in texts


def test_single_epoch_draws_markers():
    root = ET.fromstring(curve_svg(_logs(1), "loss"))
    assert not root.findall("svg:polyline", NS)
    assert [c.get("data-series") for c in root.findall("svg:circle", NS)] == ["train", "val"]


def test_curve_rejects_unknown_metric_and_empty_log():
    with pytest.raises(UsageError, match="accuracy, auc, recall, loss"):
        curve_svg(_logs(3), "f1")
    with pytest.raises(UsageError):
        curve_svg([], "loss")


def test_curve_bytes_are_deterministic():
    assert curve_svg(_logs(7), "auc") == curve_svg(_logs(7), "auc")


def test_comparison_bars_per_model():
    rows = [
        ReportRow("CNN", "test", 0.9, 0.95, 0.88, 0.3),
        ReportRow("ResNet-50", "test", 0.8413, 0.9485, 0.8345, 0.598),
        ReportRow("CNN", "train", 1.0, 1.0, 1.0, 0.01),
    ]
    root = ET.fromstring(comparison_svg(rows))
    bars = [r for r in root.findall("svg:rect", NS) if r.find("svg:title", NS) is not None]
    assert len(bars) == 2 * 3
    assert bars[0].find("svg:title", NS).text.startswith("CNN accuracy")
    assert all(float(b.get("height")) >= 0 for b in bars)
    with pytest.raises(UsageError):
        comparison_svg(rows, split="val")
