import time
from contextlib import contextmanager
from typing import Any, Dict, List

import pandas as pd


class TimingCollector:
    """Wall-clock timings for dataset generation and training runs."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.records: List[Dict[str, Any]] = []
        self._action_start_times: Dict[str, float] = {}

    def start_measure(self, key: str):
        self._action_start_times[key] = time.perf_counter()

    def end_measure(self, key: str, **labels: Any) -> float:
        if key not in self._action_start_times:
            return 0.0
        seconds = time.perf_counter() - self._action_start_times.pop(key)
        self.record(key, seconds, **labels)
        return seconds

    def record(self, key: str, seconds: float, **labels: Any):
        self.records.append({"stage": key, **labels, "seconds": round(float(seconds), 6)})

    @contextmanager
    def measure(self, key: str, **labels: Any):
        self.start_measure(key)
        try:
            yield
        finally:
            self.end_measure(key, **labels)

    def total(self, key: str) -> float:
        return sum(r["seconds"] for r in self.records if r["stage"] == key)

    def finalize(self) -> pd.DataFrame:
        frame = pd.DataFrame.from_records(self.records)
        if frame.empty:
            return pd.DataFrame(columns=["stage", "seconds"])
        if "seconds" in frame:
            frame["minutes"] = frame["seconds"] / 60.0
        return frame
