import csv
import os

import numpy as np
import pytest

from sidelink_trk.harness.emit import (OutputError, emit, read_logs, report, step_records,
                                       write_tables)
from sidelink_trk.harness.metrics import compute_metrics

from test_campaign import short_cfg

pytestmark = pytest.mark.filterwarnings("ignore::sidelink_trk.chest.estimator.IllConditionedGram")

RMSE_HEADER = "y_m"
LOS_HEADER = ["y_m", "track", "id_rate", "gate_empty_rate", "toa_rmse_m", "n_runs"]


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def record(step, y, tracks):
    return {"run": 0, "step": step, "truth": [1.6, y, 1.5], "los_range": 10.0, "los_az": 0.0,
            "candidates": [], "tracks": tracks}


def test_empty_variant_list_gives_header_only(tmp_path):
    recs = [record(0, -70.0, {}), record(1, -68.6, {})]
    m = compute_metrics(recs, [], half_cell_m=8.0)
    write_tables(m, tmp_path)
    for name, header in [("rmse_vs_y.csv", ["y_m"]), ("cdf.csv", ["error_m"]),
                         ("los_id.csv", LOS_HEADER)]:
        h, rows = read_csv(tmp_path / name)
        assert h == header and rows == []


def test_one_variant_two_positions(tmp_path):
    recs = [record(0, -70.0, {"BM4": {"pos": [1.6, -70.0, 1.5]}}),
            record(1, -68.6, {"BM4": {"pos": [1.6, -68.0, 1.5]}})]
    m = compute_metrics(recs, ["BM4"], half_cell_m=8.0)
    write_tables(m, tmp_path)
    h, rows = read_csv(tmp_path / "rmse_vs_y.csv")
    assert h == ["y_m", "BM4"]
    assert len(rows) == 2
    np.testing.assert_allclose(np.array(rows, dtype=float), [[-70.0, 0.0], [-68.6, 0.6]])
    h, rows = read_csv(tmp_path / "los_id.csv")
    assert rows == []


@pytest.fixture(scope="module")
def emitted(tmp_path_factory):
    from sidelink_trk.harness.campaign import run_campaign
    out = tmp_path_factory.mktemp("emit")
    res = run_campaign(short_cfg(), workers=1)
    m = emit(res, out)
    return res, m, out


def test_emit_layout(emitted):
    res, m, out = emitted
    names = {"rmse_vs_y.csv", "cdf.csv", "los_id.csv", "summary.txt", "runs"}
    assert names <= set(os.listdir(out))
    d = out / "runs" / str(res.cfg.seed)
    assert sorted(os.listdir(d)) == ["0.jsonl", "1.jsonl", "campaign.json"]
    h, rows = read_csv(out / "rmse_vs_y.csv")
    assert h == ["y_m", *m.tracks]
    assert len(rows) == len(res.truth)
    h, rows = read_csv(out / "los_id.csv")
    assert h == LOS_HEADER
    # eight filter tracks plus BM3, one row per position each
    assert len(rows) == 9 * len(res.truth)


def test_cdf_round_trip_monotone(emitted):
    _, m, out = emitted
    h, rows = read_csv(out / "cdf.csv")
    a = np.array(rows, dtype=float)
    assert h[0] == "error_m"
    assert np.all(np.diff(a[:, 0]) > 0)
    assert np.all(np.diff(a[:, 1:], axis=0) >= 0)
    assert a[:, 1:].min() >= 0 and a[:, 1:].max() <= 1
    np.testing.assert_allclose(a[:, 1:], m.cdf, rtol=1e-9)


def test_logs_carry_replay_data(emitted):
    res, _, out = emitted
    recs, meta = read_logs(out / "runs" / str(res.cfg.seed))
    assert len(recs) == 2 * len(res.truth)
    r = recs[5]
    assert set(r["seeds"]) == {"cru_noise", "rsu_noise", "cru_cpd", "rsu_cpd", "bias"}
    assert "EECLB-LOS/gated" in r["tracks"]
    assert "eeclb_trace_m2" in r["tracks"]["EECLB-NLOS/ungated"]
    assert "los_index" in r["tracks"]["BM3"]
    assert meta["tracks"] == list(res.runs[0].tracks)


def test_report_reproduces_tables(emitted, tmp_path):
    res, m, out = emitted
    before = {n: (out / n).read_text() for n in ("rmse_vs_y.csv", "cdf.csv", "los_id.csv")}
    m2 = report(out)
    for n, text in before.items():
        assert (out / n).read_text() == text
    np.testing.assert_array_equal(m.rmse, m2.rmse)


def test_json_records_match_in_memory(emitted):
    res, _, _ = emitted
    recs = step_records(res)
    assert recs[0]["truth"] == res.truth[0].tolist()


def test_unwritable_target_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    m = compute_metrics([record(0, 0.0, {})], [], 8.0)
    with pytest.raises(OutputError, match=str(blocker)):
        write_tables(m, blocker / "sub")


def test_report_without_logs(tmp_path):
    with pytest.raises(OutputError, match="no step logs"):
        report(tmp_path)
