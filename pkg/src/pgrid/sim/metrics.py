"""Run summary written by ``pgrid sim`` as sorted-key JSON plus a CSV series."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from statistics import fmean
from typing import Any


@dataclass
class LookupRecord:
    index: int
    time: float
    node: str
    service: str
    outcome: str = "pending"
    provider: str | None = None
    reason: str = ""
    messages: int = 0
    flooding_messages: int | None = None
    resolved_at: float | None = None


@dataclass
class MetricsReport:
    messages_by_type: dict[str, int] = field(default_factory=dict)
    messages_total: int = 0
    messages_dropped: int = 0
    messages_lost: int = 0
    per_lookup_messages: list[int] = field(default_factory=list)
    lookup_outcomes: dict[str, int] = field(default_factory=dict)
    lookups: list[LookupRecord] = field(default_factory=list)
    load_stddev_series: list[tuple[float, float]] = field(default_factory=list)
    migrations: dict[str, int] = field(default_factory=dict)
    migration_log: list[dict[str, Any]] = field(default_factory=list)
    leader_elections: int = 0
    flooding_messages_total: int | None = None
    fanout: dict[str, int] = field(default_factory=dict)
    conservation_ok: bool = True
    leaders: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.messages_total != sum(self.messages_by_type.values()):
            raise ValueError("messages_total disagrees with messages_by_type")

    @property
    def mean_load_stddev(self) -> float:
        return fmean(s for _, s in self.load_stddev_series) if self.load_stddev_series else 0.0

    @property
    def traffic_ratio(self) -> float | None:
        hier = sum(self.per_lookup_messages)
        if self.flooding_messages_total is None or hier == 0:
            return None
        return self.flooding_messages_total / hier

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["load_stddev_series"] = [list(p) for p in self.load_stddev_series]
        d["mean_load_stddev"] = self.mean_load_stddev
        d["traffic_ratio"] = self.traffic_ratio
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def stddev_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "cpu_stddev"])
        for t, s in self.load_stddev_series:
            w.writerow([f"{t:.6f}", f"{s:.6f}"])
        return buf.getvalue()


def count_outcomes(records: list[LookupRecord]) -> dict[str, int]:
    c = Counter({"local": 0, "domain": 0, "remote": 0, "notfound": 0})
    for r in records:
        c[r.outcome] += 1
    return dict(sorted(c.items()))
