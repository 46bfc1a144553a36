"""Per-frame scores and their aggregation into per-split tables."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

METRIC_FIELDS = ("s_alpha", "e_phi_mn", "f_w_beta", "dice")
COLUMN_NAMES = {"s_alpha": "S_alpha", "e_phi_mn": "E_phi_mn", "f_w_beta": "F_w_beta", "dice": "Dice"}
SPLIT_ORDER = ("easy-seen", "easy-unseen", "hard-seen", "hard-unseen")


@dataclass(frozen=True)
class FrameScore:
    s_alpha: float
    e_phi_mn: float
    f_w_beta: float
    dice: float
    frame_id: str = ""
    case_id: str = ""

    def __post_init__(self):
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class SplitRow:
    split: str
    n_frames: int
    s_alpha: float
    e_phi_mn: float
    f_w_beta: float
    dice: float

    def metric(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class MetricReport:
    rows: list[SplitRow] = field(default_factory=list)

    def __getitem__(self, split: str) -> SplitRow:
        for row in self.rows:
            if row.split == split:
                return row
        raise KeyError(split)

    @property
    def splits(self) -> list[str]:
        return [r.split for r in self.rows]

    def to_records(self) -> list[dict]:
        out = []
        for r in self.rows:
            rec = {"split": r.split, "n_frames": r.n_frames}
            rec.update({COLUMN_NAMES[m]: round(getattr(r, m), 3) for m in METRIC_FIELDS})
            out.append(rec)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["split", "n_frames"] + [COLUMN_NAMES[m] for m in METRIC_FIELDS])
        for r in self.rows:
            writer.writerow([r.split, r.n_frames] + [f"{getattr(r, m):.3f}" for m in METRIC_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        full = [asdict(r) for r in self.rows]
        return json.dumps({"rows": self.to_records(), "full_precision": full}, indent=2, sort_keys=True)


def _split_sort_key(name: str):
    return (SPLIT_ORDER.index(name) if name in SPLIT_ORDER else len(SPLIT_ORDER), name)


def _mean_row(split: str, scores: list[FrameScore], per_case: bool) -> SplitRow:
    if per_case:
        by_case: dict[str, list[FrameScore]] = defaultdict(list)
        for s in scores:
            by_case[s.case_id].append(s)
        units = [[sum(getattr(s, m) for s in group) / len(group) for m in METRIC_FIELDS]
                 for _, group in sorted(by_case.items())]
    else:
        units = [[getattr(s, m) for m in METRIC_FIELDS]
                 for s in sorted(scores, key=lambda s: (s.case_id, s.frame_id))]
    means = [min(1.0, max(0.0, sum(u[i] for u in units) / len(units))) for i in range(len(METRIC_FIELDS))]
    return SplitRow(split, len(scores), *means)


def aggregate_report(scores, split_map, per_case: bool = False) -> MetricReport:
    """Average frame scores within each split.

    ``split_map`` maps a frame's ``case_id`` (or ``(case_id, frame_id)``) to its
    split name.  Frames are pooled within a split unless ``per_case`` is set,
    in which case frames are averaged per case first.  Summation follows a
    sorted order, so the result does not depend on input order.
    """
    groups: dict[str, list[FrameScore]] = defaultdict(list)
    for s in scores:
        key = (s.case_id, s.frame_id)
        split = split_map.get(key, split_map.get(s.case_id))
        if split is None:
            raise KeyError(f"frame {s.frame_id!r} of case {s.case_id!r} has no split assignment")
        groups[split].append(s)
    rows = [_mean_row(name, groups[name], per_case) for name in sorted(groups, key=_split_sort_key)]
    return MetricReport(rows)
