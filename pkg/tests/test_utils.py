import time

from scopf_proxy.utils.io import read_json, write_json
from scopf_proxy.utils.metrics import TimingCollector
from scopf_proxy.utils.parallel import ordered_map


def test_ordered_map_keeps_input_order():
    def slow_square(x):
        time.sleep(0.01 * (5 - x))
        return x * x

    assert ordered_map(slow_square, range(5), workers=4) == [0, 1, 4, 9, 16]
    assert ordered_map(slow_square, [], workers=4) == []


def test_timing_collector_records_labels():
    timings = TimingCollector()
    with timings.measure("training", mode="self", n_samples=3):
        pass
    timings.record("dataset", 120.0, n_samples=3)
    assert timings.end_measure("never-started") == 0.0
    frame = timings.finalize()
    assert frame["stage"].tolist() == ["training", "dataset"]
    assert frame.loc[1, "minutes"] == 2.0
    assert timings.total("dataset") == 120.0


def test_empty_timings_frame_has_columns():
    assert list(TimingCollector().finalize().columns) == ["stage", "seconds"]


def test_json_floats_survive_round_trip(tmp_path):
    value = {"x": 0.1 + 0.2, "nested": [1 / 3]}
    assert read_json(write_json(tmp_path / "v.json", value)) == value
