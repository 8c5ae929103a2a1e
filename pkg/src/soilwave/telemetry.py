"""Uplink data model, CSV / newline-JSON parsing and the binary record store.

Binary store layout (little-endian)::

    b"SWV1"                       magic
    u16   format version (= 1)
    u32   gateway count G
    G x ( u16 byte length, utf-8 gateway id )
    u64   record count N
    N x   record (45 bytes):
          i64 ts | u32 gateway index | f64 rssi | f64 snr
          | u8 presence flags (bit0 humidity, bit1 temp) | f64 humidity | f64 temp

Absent optional fields are written as 0.0 with the presence bit cleared.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import DecodeError, FormatError, ParseError, StorageError, ValidationError

CSV_HEADER = ("ts", "gateway_id", "rssi_dbm", "snr_db", "soil_humidity_pct", "soil_temp_c")

MAGIC = b"SWV1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sH")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_RECORD = struct.Struct("<qIddBdd")

_HAS_HUM = 0x01
_HAS_TEMP = 0x02

_path_locks: dict[str, threading.Lock] = {}
_path_locks_guard = threading.Lock()


def _lock_for(path) -> threading.Lock:
    key = os.path.abspath(os.fspath(path))
    with _path_locks_guard:
        return _path_locks.setdefault(key, threading.Lock())


@dataclass(frozen=True, order=False)
class UplinkRecord:
    """One received LoRa packet as seen by one gateway."""

    ts: int
    gateway_id: str
    rssi: float
    snr: float
    soil_humidity: Optional[float] = None
    soil_temp: Optional[float] = None

    def __post_init__(self):
        validate_record(self)

    @property
    def sort_key(self):
        # the trailing fields only order exact (ts, gateway) duplicates, so the
        # stored order never depends on input order
        def opt(v):
            return (0, 0.0) if v is None else (1, v)
        return (self.ts, self.gateway_id, self.rssi, self.snr, opt(self.soil_humidity), opt(self.soil_temp))


def validate_record(rec: UplinkRecord) -> None:
    if isinstance(rec.ts, bool) or not isinstance(rec.ts, int):
        raise ValidationError(f"ts: expected integer epoch seconds, got {rec.ts!r}")
    if rec.ts <= 0:
        raise ValidationError(f"ts: must be strictly positive, got {rec.ts}")
    if not isinstance(rec.gateway_id, str) or not rec.gateway_id:
        raise ValidationError("gateway_id: must be a non-empty string")
    _check_range("rssi", rec.rssi, -200.0, 0.0)
    _check_range("snr", rec.snr, -30.0, 30.0)
    if rec.soil_humidity is not None:
        _check_range("soil_humidity", rec.soil_humidity, 0.0, 100.0)
    if rec.soil_temp is not None and not math.isfinite(rec.soil_temp):
        raise ValidationError("soil_temp: must be finite")


def _check_range(name, value, low, high):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ValidationError(f"{name}: expected a number, got {value!r}")
    if not math.isfinite(value) or not (low <= value <= high):
        raise ValidationError(f"{name}: {value} outside [{low}, {high}]")


@dataclass(frozen=True)
class RecordSet:
    """Time-ordered uplink records; ties on ``ts`` ordered by gateway id."""

    records: tuple[UplinkRecord, ...] = ()
    gateways: tuple[str, ...] = field(default=())

    @classmethod
    def from_records(cls, records: Iterable[UplinkRecord]) -> "RecordSet":
        ordered = tuple(sorted(records, key=lambda r: r.sort_key))
        gateways = tuple(sorted({r.gateway_id for r in ordered}))
        return cls(ordered, gateways)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def for_gateway(self, gateway_id: str) -> list[UplinkRecord]:
        return [r for r in self.records if r.gateway_id == gateway_id]


# -- CSV -------------------------------------------------------------------


def _parse_float(cell, name, line, optional=False):
    cell = cell.strip()
    if cell == "":
        if optional:
            return None
        raise ParseError(f"missing value for {name}", line)
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"{name}: not a number: {cell!r}", line) from None
    return value


def parse_uplink_csv(text: str) -> RecordSet:
    """Parse the six-column uplink CSV (header required, exact)."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty document, header row required", 1) from None
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise ParseError(f"header must be {','.join(CSV_HEADER)}", 1)

    records = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise ParseError(f"expected {len(CSV_HEADER)} columns, got {len(row)}", line)
        ts_cell = row[0].strip()
        try:
            ts = int(ts_cell)
        except ValueError:
            raise ParseError(f"ts: not an integer: {ts_cell!r}", line) from None
        gw = row[1].strip()
        rssi = _parse_float(row[2], "rssi_dbm", line)
        snr = _parse_float(row[3], "snr_db", line)
        hum = _parse_float(row[4], "soil_humidity_pct", line, optional=True)
        temp = _parse_float(row[5], "soil_temp_c", line, optional=True)
        try:
            records.append(UplinkRecord(ts, gw, rssi, snr, hum, temp))
        except ValidationError as exc:
            raise ValidationError(f"line {line}: {exc}") from None
    return RecordSet.from_records(records)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def format_uplink_csv(rs: RecordSet) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rs.records:
        writer.writerow([r.ts, r.gateway_id, _fmt(r.rssi), _fmt(r.snr),
                         _fmt(r.soil_humidity), _fmt(r.soil_temp)])
    return out.getvalue()


# -- newline JSON ----------------------------------------------------------


def _json_number(obj, key, required):
    if key not in obj or obj[key] is None:
        if required:
            raise DecodeError(f"missing required key {key!r}")
        return None
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DecodeError(f"{key!r} must be numeric, got {value!r}")
    return float(value)


def decode_uplink_json(line: str) -> UplinkRecord:
    """Decode one TTN-style forwarded uplink object."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise DecodeError("uplink line must be a JSON object")
    for key in ("ts", "gw", "rssi", "snr"):
        if key not in obj:
            raise DecodeError(f"missing required key {key!r}")
    ts = obj["ts"]
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise DecodeError(f"'ts' must be an integer, got {ts!r}")
    gw = obj["gw"]
    if not isinstance(gw, str):
        raise DecodeError(f"'gw' must be a string, got {gw!r}")
    rssi = _json_number(obj, "rssi", True)
    snr = _json_number(obj, "snr", True)
    hum = _json_number(obj, "hum", False)
    temp = _json_number(obj, "temp", False)
    return UplinkRecord(ts, gw, rssi, snr, hum, temp)


def decode_uplink_stream(lines: Iterable[str]) -> RecordSet:
    """Decode a newline-JSON stream; blank lines are skipped."""
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(decode_uplink_json(line))
        except (DecodeError, ValidationError) as exc:
            raise DecodeError(f"line {lineno}: {exc}") from None
    return RecordSet.from_records(records)


def encode_uplink_json(rec: UplinkRecord) -> str:
    obj = {"ts": rec.ts, "gw": rec.gateway_id, "rssi": rec.rssi, "snr": rec.snr}
    if rec.soil_humidity is not None:
        obj["hum"] = rec.soil_humidity
    if rec.soil_temp is not None:
        obj["temp"] = rec.soil_temp
    return json.dumps(obj)


# -- binary store ----------------------------------------------------------


def _encode_store(rs: RecordSet) -> bytes:
    gateways = sorted({r.gateway_id for r in rs.records} | set(rs.gateways))
    index = {g: i for i, g in enumerate(gateways)}
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION), _U32.pack(len(gateways))]
    for g in gateways:
        raw = g.encode("utf-8")
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
    parts.append(_U64.pack(len(rs.records)))
    for r in rs.records:
        flags = (_HAS_HUM if r.soil_humidity is not None else 0) | (
            _HAS_TEMP if r.soil_temp is not None else 0)
        parts.append(_RECORD.pack(
            r.ts, index[r.gateway_id], r.rssi, r.snr, flags,
            0.0 if r.soil_humidity is None else r.soil_humidity,
            0.0 if r.soil_temp is None else r.soil_temp,
        ))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, st: struct.Struct):
        end = self.pos + st.size
        if end > len(self.data):
            raise FormatError("truncated store file")
        values = st.unpack_from(self.data, self.pos)
        self.pos = end
        return values

    def raw(self, n):
        end = self.pos + n
        if end > len(self.data):
            raise FormatError("truncated store file")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk


def _decode_store(data: bytes) -> RecordSet:
    rd = _Reader(data)
    magic, version = rd.take(_HEADER)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported store format version v{version}")
    (n_gw,) = rd.take(_U32)
    gateways = []
    for _ in range(n_gw):
        (length,) = rd.take(_U16)
        gateways.append(rd.raw(length).decode("utf-8"))
    (n,) = rd.take(_U64)
    records = []
    for _ in range(n):
        ts, gi, rssi, snr, flags, hum, temp = rd.take(_RECORD)
        if gi >= n_gw:
            raise FormatError(f"gateway index {gi} out of range")
        records.append(UplinkRecord(
            ts, gateways[gi], rssi, snr,
            hum if flags & _HAS_HUM else None,
            temp if flags & _HAS_TEMP else None,
        ))
    if rd.pos != len(data):
        raise FormatError("trailing bytes after last record")
    return RecordSet(tuple(records), tuple(gateways))


def store_save(rs: RecordSet, path) -> None:
    payload = _encode_store(rs)
    with _lock_for(path):
        try:
            Path(path).write_bytes(payload)
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc


def store_load(path) -> RecordSet:
    with _lock_for(path):
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read {path}: {exc}") from exc
    return _decode_store(data)


def load_records(path) -> RecordSet:
    """Load a record set by extension: ``.csv``, ``.jsonl``/``.ndjson`` or binary store."""
    p = Path(path)
    suffix = p.suffix.lower()
    try:
        if suffix == ".csv":
            return parse_uplink_csv(p.read_text(encoding="utf-8"))
        if suffix in (".jsonl", ".ndjson"):
            return decode_uplink_stream(p.read_text(encoding="utf-8").splitlines())
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return store_load(p)


def save_records(rs: RecordSet, path, fmt: Optional[str] = None) -> None:
    p = Path(path)
    fmt = fmt or ("csv" if p.suffix.lower() == ".csv" else
                  "jsonl" if p.suffix.lower() in (".jsonl", ".ndjson") else "store")
    try:
        if fmt == "csv":
            p.write_text(format_uplink_csv(rs), encoding="utf-8")
        elif fmt == "jsonl":
            p.write_text("".join(encode_uplink_json(r) + "\n" for r in rs.records),
                         encoding="utf-8")
        else:
            store_save(rs, p)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
