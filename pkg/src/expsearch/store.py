"""Line-delimited JSON campaign logs and ingestion of external result tables.

A log is one header object followed by one record object per line, in
strictly increasing id order. Field order and number formatting are fixed so
that writing a log that was just read reproduces the original bytes.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping

from . import __version__
from .records import STATUSES, UNATTRIBUTED, ExperimentRecord, History, round_ap
from .space import Configuration, ConfigurationSpace, SpaceError, default_space, space_from_dict, validate

FORMAT = "expsearch-log/1"
RECORD_FIELDS = (
    "id", "agent", "cycle", "parent_id", "source", "status", "failure_category",
    "heal_attempts", "submit_tick", "start_tick", "end_tick", "ap",
)
CONFIG_PREFIX = "config."


class LogFormatError(ValueError):
    """Malformed log content; carries the 1-based line number and byte offset."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = f"line {line} (byte offset {offset}): " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.offset = offset


class IngestError(ValueError):
    pass


@dataclass
class CampaignLog:
    header: dict
    records: list[ExperimentRecord] = field(default_factory=list)

    @property
    def space(self) -> ConfigurationSpace | None:
        doc = self.header.get("space")
        return space_from_dict(doc) if doc else None

    @property
    def seed(self) -> int | None:
        return self.header.get("seed")

    def history(self) -> History:
        h = History(self.space, list(self.records))
        h.truncated = bool(self.header.get("truncated", False))
        h.truncation_reason = self.header.get("truncation_reason")
        return h


def make_header(
    space: ConfigurationSpace | None,
    campaign: Mapping | None = None,
    seed: int | None = None,
    oracle: Mapping | None = None,
    history: History | None = None,
    **extra: Any,
) -> dict:
    header: dict[str, Any] = {
        "kind": "header",
        "format": FORMAT,
        "version": __version__,
        "schema_hash": space.schema_hash() if space is not None else None,
        "space": space.to_dict() if space is not None else None,
        "campaign": dict(campaign) if campaign is not None else None,
        "seed": seed,
        "oracle": dict(oracle) if oracle is not None else None,
        "truncated": bool(history.truncated) if history is not None else False,
        "truncation_reason": history.truncation_reason if history is not None else None,
    }
    header.update(extra)
    return header


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _config_order(config: Configuration, space: ConfigurationSpace | None) -> list[str]:
    if space is None:
        return sorted(config)
    known = [n for n in space.names if n in config]
    return known + sorted(k for k in config if k not in space)


def record_to_obj(record: ExperimentRecord, space: ConfigurationSpace | None = None) -> dict:
    obj: dict[str, Any] = {}
    for name in RECORD_FIELDS:
        value = getattr(record, name)
        if name == "ap" and value is not None:
            value = round_ap(value)
        obj[name] = value
    for k in _config_order(record.config, space):
        obj[CONFIG_PREFIX + k] = record.config[k]
    if record.notes:
        obj["notes"] = list(record.notes)
    for k, v in record.extras:
        obj[k] = v
    return obj


def record_from_obj(obj: Mapping[str, Any]) -> ExperimentRecord:
    missing = [k for k in ("id", "status") if k not in obj]
    if missing:
        raise ValueError(f"missing fields {missing}")
    config, extras, kw = {}, [], {}
    for k, v in obj.items():
        if k.startswith(CONFIG_PREFIX):
            config[k[len(CONFIG_PREFIX):]] = v
        elif k in RECORD_FIELDS:
            kw[k] = v
        elif k == "notes":
            kw["notes"] = tuple(v)
        else:
            extras.append((k, v))
    if kw.get("agent") is None:
        kw["agent"] = UNATTRIBUTED
    return ExperimentRecord(config=Configuration(config), extras=tuple(extras), **kw)


def format_log(log: CampaignLog) -> str:
    space = log.space
    lines = [_dumps(log.header)]
    lines.extend(_dumps(record_to_obj(r, space)) for r in log.records)
    return "\n".join(lines) + "\n"


def write_log(
    history: History | CampaignLog,
    path: str | Path,
    header: Mapping | None = None,
) -> Path:
    """Write ``history`` as a log. Without an explicit header one is built
    from the history's space."""
    if isinstance(history, CampaignLog):
        log = history
    else:
        hdr = dict(header) if header is not None else make_header(history.space, history=history)
        log = CampaignLog(hdr, list(history.records))
    ids = [r.id for r in log.records]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise LogFormatError("record ids must be strictly increasing")
    path = Path(path)
    path.write_text(format_log(log), encoding="utf-8")
    return path


def parse_log(text: str | bytes, source: str = "<log>") -> CampaignLog:
    data = text.encode("utf-8") if isinstance(text, str) else text
    header: dict | None = None
    records: list[ExperimentRecord] = []
    offset = 0
    last_id = None
    for lineno, raw in enumerate(data.splitlines(keepends=True), start=1):
        start = offset
        offset += len(raw)
        body = raw.strip()
        if not body:
            continue
        try:
            obj = json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise LogFormatError(f"{source}: invalid JSON ({exc})", lineno, start) from None
        if not isinstance(obj, dict):
            raise LogFormatError(f"{source}: expected an object", lineno, start)
        if header is None:
            if obj.get("kind") != "header":
                raise LogFormatError(f"{source}: first line must be the header", lineno, start)
            header = obj
            continue
        try:
            rec = record_from_obj(obj)
        except (TypeError, ValueError) as exc:
            raise LogFormatError(f"{source}: bad record ({exc})", lineno, start) from None
        if last_id is not None and rec.id <= last_id:
            raise LogFormatError(f"{source}: record id {rec.id} not increasing", lineno, start)
        last_id = rec.id
        records.append(rec)
    if header is None:
        raise LogFormatError(f"{source}: empty log, no header", 1, 0)
    log = CampaignLog(header, records)
    doc = header.get("space")
    if doc:
        try:
            space = space_from_dict(doc)
        except SpaceError as exc:
            raise LogFormatError(f"{source}: header space invalid ({exc})", 1, 0) from None
        if header.get("schema_hash") not in (None, space.schema_hash()):
            warnings.warn(f"{source}: header schema hash does not match its space", stacklevel=2)
    return log


def read_log(path: str | Path, expected_space: ConfigurationSpace | None = None) -> CampaignLog:
    path = Path(path)
    log = parse_log(path.read_bytes(), str(path))
    if expected_space is not None and log.header.get("schema_hash") != expected_space.schema_hash():
        warnings.warn(f"{path}: log was written for a different space", stacklevel=2)
    return log


# ---------------------------------------------------------------- ingestion

STATUS_WORDS = {
    "completed": "completed", "complete": "completed", "success": "completed", "ok": "completed",
    "done": "completed", "failed": "failed", "failure": "failed", "error": "failed",
    "crashed": "failed", "abandoned": "abandoned", "skipped": "abandoned",
}


@dataclass
class IngestReport:
    n_rows: int
    n_ingested: int
    dropped: Counter

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def _read_rows(path: Path, fmt: str | None) -> list[dict]:
    fmt = fmt or ("csv" if path.suffix.lower() in (".csv", ".tsv") else "jsonl")
    if fmt in ("csv", "tsv"):
        delim = "\t" if fmt == "tsv" or path.suffix.lower() == ".tsv" else ","
        with path.open(newline="", encoding="utf-8") as fh:
            return [dict(row) for row in csv.DictReader(fh, delimiter=delim)]
    if fmt == "jsonl":
        rows = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise IngestError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
        return rows
    raise IngestError(f"unknown input format {fmt!r}")


def _blank(v: Any) -> bool:
    return v is None or (isinstance(v, str) and not v.strip()) or (isinstance(v, float) and math.isnan(v))


def _as_time(v: Any) -> float:
    if isinstance(v, (int, float)):
        return float(v)
    text = str(v).strip()
    try:
        return float(text)
    except ValueError:
        return datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()


def _field(row: Mapping, column: str | None) -> Any:
    if column is None:
        return None
    v = row.get(column)
    return None if _blank(v) else v


def ingest_external(
    path: str | Path,
    mapping_spec: Mapping[str, Any],
    space: ConfigurationSpace | None = None,
) -> tuple[CampaignLog, IngestReport]:
    """Normalize an external CSV/JSONL result table into a campaign log.

    ``mapping_spec`` keys:
      fields: record field -> column; ``ap`` and ``status`` are required,
        optional ``agent``, ``id``, ``timestamp``, ``submit_tick``,
        ``end_tick``, ``failure_category``, ``source``
      config: dimension -> column
      status_map: raw status -> completed|failed|abandoned (merged over defaults)
      defaults: fill missing dimensions with the space default (default true)
      format: csv|tsv|jsonl (else inferred from the suffix)

    Rows that cannot be mapped are dropped and counted by reason. Rows are
    ordered by timestamp when one is mapped, otherwise by file order, and
    renumbered from 1; the external id is kept as ``external_id``.
    """
    space = space or default_space()
    fields = dict(mapping_spec.get("fields") or {})
    missing = [k for k in ("ap", "status") if not fields.get(k)]
    if missing:
        raise IngestError(f"mapping spec lacks mandatory fields {missing}")
    config_map = dict(mapping_spec.get("config") or {})
    unknown_dims = [d for d in config_map if d not in space]
    if unknown_dims:
        raise IngestError(f"mapping names unknown dimensions {unknown_dims}")
    status_map = {**STATUS_WORDS, **{str(k).lower(): v for k, v in (mapping_spec.get("status_map") or {}).items()}}
    fill_defaults = bool(mapping_spec.get("defaults", True))
    rows = _read_rows(Path(path), mapping_spec.get("format"))

    dropped: Counter = Counter()
    staged = []
    for pos, row in enumerate(rows):
        raw_status = _field(row, fields["status"])
        status = status_map.get(str(raw_status).strip().lower()) if raw_status is not None else None
        if status not in STATUSES:
            dropped["status"] += 1
            continue
        ap_raw = _field(row, fields["ap"])
        ap = None
        if ap_raw is not None:
            try:
                ap = float(ap_raw)
            except (TypeError, ValueError):
                ap = None
            if ap is not None and not 0.0 <= ap <= 1.0:
                ap = None
        if status == "completed" and ap is None:
            dropped["missing_ap"] += 1
            continue
        config = {}
        bad = False
        for dim_name, column in config_map.items():
            v = _field(row, column)
            if v is None:
                continue
            dim = space[dim_name]
            if dim.is_categorical:
                level = dim.canonical_level(v)
                if level is None:
                    bad = True
                    break
                config[dim_name] = level
            else:
                try:
                    config[dim_name] = float(v)
                except (TypeError, ValueError):
                    bad = True
                    break
        if not bad and fill_defaults:
            active = space.active_dims({k: v for k, v in config.items() if space[k].is_categorical})
            for d in active:
                if d not in config and space[d].default is not None:
                    config[d] = space[d].default
            config = {k: v for k, v in config.items() if k in active}
        if bad or validate(space, config):
            dropped["config"] += 1
            continue
        try:
            t = _field(row, fields.get("timestamp"))
            order_key = _as_time(t) if t is not None else float(pos)
            submit = _field(row, fields.get("submit_tick"))
            end = _field(row, fields.get("end_tick"))
            submit = int(float(submit)) if submit is not None else None
            end = int(float(end)) if end is not None else None
        except (TypeError, ValueError):
            dropped["timestamp"] += 1
            continue
        staged.append((order_key, pos, row, status, ap, config, submit, end))

    staged.sort(key=lambda s: (s[0], s[1]))
    records = []
    for new_id, (order_key, pos, row, status, ap, config, submit, end) in enumerate(staged, start=1):
        tick = new_id if submit is None else submit
        end_tick = max(tick, end if end is not None else tick)
        extras = []
        ext_id = _field(row, fields.get("id"))
        if ext_id is not None:
            extras.append(("external_id", ext_id))
        agent = _field(row, fields.get("agent"))
        fcat = _field(row, fields.get("failure_category")) if status == "failed" else None
        records.append(ExperimentRecord(
            id=new_id, config=Configuration(config), status=status,
            agent=str(agent) if agent is not None else UNATTRIBUTED,
            source=str(_field(row, fields.get("source")) or "external"),
            ap=round_ap(ap) if status == "completed" else None,
            failure_category=str(fcat) if fcat is not None else None,
            submit_tick=tick, start_tick=tick, end_tick=end_tick,
            extras=tuple(extras),
        ))
    report = IngestReport(len(rows), len(records), dropped)
    header = make_header(
        space, ingest={"source": str(path), "rows": len(rows), "ingested": len(records),
                       "dropped": dict(sorted(dropped.items()))},
    )
    return CampaignLog(header, records), report
