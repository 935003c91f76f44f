import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dgseg3d.errors import ValidationError
from dgseg3d.report import EvalRow, read_results_csv, report
from dgseg3d.scene import CLASS_NAMES


def _rows():
    rng = np.random.default_rng(0)
    return [
        EvalRow("base", "target_test", rng.uniform(0, 1, 8), 0.41, 0.02),
        EvalRow("full", "target_test", rng.uniform(0, 1, 8), 0.52, 0.01),
    ]


def test_report_writes_csv_md_and_svg(tmp_path):
    written = report(_rows(), tmp_path)
    names = {p.name for p in written}
    assert "results.csv" in names and "results.md" in names
    svgs = [p for p in written if p.suffix == ".svg"]
    assert len(svgs) == 2

    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "target", *CLASS_NAMES, "miou", "miou_sd"]
    assert len(rows) == 3

    for svg in svgs:
        tree = ET.parse(svg)  # well-formed XML
        assert tree.getroot().tag.endswith("svg")


def test_markdown_table_has_eleven_columns(tmp_path):
    report(_rows(), tmp_path)
    lines = (tmp_path / "results.md").read_text().splitlines()
    header_cells = [c.strip() for c in lines[0].strip("|").split("|")]
    assert len(header_cells) == 2 + 8 + 1
    assert header_cells[0] == "method"
    assert header_cells[-1] == "mIoU"
    for line in lines[2:]:
        assert len(line.strip("|").split("|")) == 11


def test_results_csv_roundtrip(tmp_path):
    rows = _rows()
    report(rows, tmp_path)
    back = read_results_csv(tmp_path / "results.csv")
    assert len(back) == 2
    for a, b in zip(rows, back):
        assert a.method == b.method and a.target == b.target
        np.testing.assert_allclose(a.per_class_iou, b.per_class_iou)
        assert a.miou == b.miou and a.miou_sd == b.miou_sd


def test_report_rejects_empty(tmp_path):
    with pytest.raises(ValidationError):
        report([], tmp_path)


def test_report_deterministic_bytes(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    report(_rows(), a_dir)
    report(_rows(), b_dir)
    for name in ("results.csv", "results.md"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()
    for svg in sorted(p.name for p in a_dir.glob("*.svg")):
        assert (a_dir / svg).read_bytes() == (b_dir / svg).read_bytes()


def test_nan_iou_rendering(tmp_path):
    row = EvalRow("m", "t", np.array([np.nan] * 4 + [0.5] * 4), 0.5, None)
    report([row], tmp_path)
    md = (tmp_path / "results.md").read_text()
    assert " - " in md
    back = read_results_csv(tmp_path / "results.csv")
    assert np.isnan(back[0].per_class_iou[0])
