"""Panel CSV files, corpus manifests and the held-out truth sidecar.

Panel file: header ``timestamp,<analyte>,...``; one row per time step; an empty
field is a missing value. Manifest: JSON listing panel files with a
``train``/``test`` split tag and the shared analyte order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ParseError
from .preprocessing import TimeSeriesPanel

MANIFEST_FORMAT = "vimpute-corpus/1"
TRUTH_HEADER = ["panel_id", "t", "f", "true_value"]
SPLITS = ("train", "test")


@dataclass
class Corpus:
    panels: list
    splits: dict
    analytes: tuple
    timestamp_policy: str = "column"
    notes: str = ""

    def select(self, split: str) -> list:
        if split == "all":
            return list(self.panels)
        return [p for p in self.panels if self.splits[p.panel_id] == split]

    def by_id(self) -> dict:
        return {p.panel_id: p for p in self.panels}


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_panel(panel: TimeSeriesPanel, path, values: Optional[np.ndarray] = None) -> None:
    """Write ``values`` (default: the panel's raw values) in panel CSV format."""
    vals = panel.values if values is None else values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *panel.analytes])
        for s, row in zip(panel.timestamps, vals):
            w.writerow([repr(float(s)), *(_fmt(v) for v in row)])


def read_panel(path, panel_id: Optional[str] = None, analytes: Optional[Sequence[str]] = None) -> TimeSeriesPanel:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty panel file", path)
    header = rows[0]
    if len(header) < 2 or header[0] != "timestamp":
        raise ParseError("header must start with 'timestamp' followed by analyte names", path, 1)
    names = header[1:]
    if analytes is not None and list(analytes) != names:
        raise ParseError(
            f"columns {names} do not match the manifest analytes {list(analytes)}", path, 1
        )
    width = len(header)
    stamps, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", path, r)
        parsed = []
        for c, field_text in enumerate(row, start=1):
            text = field_text.strip()
            if text == "":
                if c == 1:
                    raise ParseError("timestamp is empty", path, r, c)
                parsed.append(math.nan)
                continue
            try:
                v = float(text)
            except ValueError:
                raise ParseError(f"not a number: {text!r}", path, r, c) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {text!r}", path, r, c)
            parsed.append(v)
        stamps.append(parsed[0])
        values.append(parsed[1:])
    if not values:
        raise ParseError("panel has no rows", path)
    stamps = np.array(stamps)
    for r in range(1, len(stamps)):
        if stamps[r] == stamps[r - 1]:
            raise ParseError(f"duplicate timestamp {stamps[r]!r}", path, r + 2, 1)
        if stamps[r] < stamps[r - 1]:
            raise ParseError(f"timestamp {stamps[r]!r} goes backwards", path, r + 2, 1)
    return TimeSeriesPanel(panel_id or path.stem, np.array(values), stamps, names)


def write_corpus(corpus: Corpus, out_dir, values: Optional[dict] = None) -> Path:
    """Write every panel plus ``manifest.json``; ``values`` may override panel contents by id."""
    out = Path(out_dir)
    (out / "panels").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in corpus.panels:
        rel = f"panels/{p.panel_id}.csv"
        write_panel(p, out / rel, None if values is None else values.get(p.panel_id))
        entries.append({"id": p.panel_id, "path": rel, "split": corpus.splits[p.panel_id]})
    manifest = {
        "format": MANIFEST_FORMAT,
        "analytes": list(corpus.analytes),
        "timestamp_policy": corpus.timestamp_policy,
        "notes": corpus.notes,
        "panels": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_corpus(manifest_path) -> Corpus:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON ({exc.msg})", manifest_path, exc.lineno) from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{manifest_path}: unsupported manifest format {manifest.get('format')!r}")
    analytes = tuple(manifest["analytes"])
    base = manifest_path.parent
    panels, splits = [], {}
    for entry in manifest["panels"]:
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise DataError(f"{manifest_path}: panel {entry['id']} has unknown split {split!r}")
        if entry["id"] in splits:
            raise DataError(f"{manifest_path}: duplicate panel id {entry['id']!r}")
        panel_path = base / entry["path"]
        if not panel_path.exists():
            raise DataError(f"panel file not found: {panel_path}")
        panels.append(read_panel(panel_path, entry["id"], analytes))
        splits[entry["id"]] = split
    return Corpus(panels, splits, analytes, manifest.get("timestamp_policy", "column"), manifest.get("notes", ""))


# ------------------------------------------------------------ truth sidecar


def write_truth(panels: Sequence[TimeSeriesPanel], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for p in panels:
            for t, f in zip(*np.nonzero(p.eval_mask == 1)):
                w.writerow([p.panel_id, int(t), p.analytes[f], repr(float(p.truth[t, f]))])


def read_truth(path) -> dict:
    """``{panel_id: [(t, analyte, value), ...]}``."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise DataError(f"truth sidecar not found: {path}") from None
    out: dict = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRUTH_HEADER:
            raise ParseError(f"header must be {','.join(TRUTH_HEADER)}", path, 1)
        for r, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, found {len(row)}", path, r)
            try:
                out.setdefault(row[0], []).append((int(row[1]), row[2], float(row[3])))
            except ValueError as exc:
                raise ParseError(str(exc), path, r) from None
    return out


def attach_truth(panels: Sequence[TimeSeriesPanel], truth: dict) -> list:
    """Mark sidecar cells as evaluation cells and store their true values."""
    out = []
    for p in panels:
        evm = np.zeros_like(p.eval_mask)
        tv = np.full(p.values.shape, np.nan)
        for t, name, value in truth.get(p.panel_id, []):
            if name not in p.analytes:
                raise DataError(f"truth sidecar names unknown analyte {name!r} for panel {p.panel_id}")
            f = p.analytes.index(name)
            if not 0 <= t < p.T:
                raise DataError(f"truth sidecar row {t} outside panel {p.panel_id}")
            if p.obs_mask[t, f] == 1:
                raise DataError(f"truth sidecar cell ({t}, {name}) of panel {p.panel_id} is observed in the corpus")
            evm[t, f] = 1
            tv[t, f] = value
        out.append(p.replace(eval_mask=evm, truth=tv))
    return out
