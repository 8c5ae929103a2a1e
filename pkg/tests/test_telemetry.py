import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soilwave.errors import DecodeError, FormatError, ParseError, StorageError, ValidationError
from soilwave.telemetry import (
    CSV_HEADER,
    RecordSet,
    UplinkRecord,
    decode_uplink_json,
    decode_uplink_stream,
    encode_uplink_json,
    format_uplink_csv,
    load_records,
    parse_uplink_csv,
    save_records,
    store_load,
    store_save,
)

HEADER = ",".join(CSV_HEADER) + "\n"


def rec(ts=1735689600, gw="gw1", rssi=-95.0, snr=5.5, hum=31.0, temp=12.0):
    return UplinkRecord(ts, gw, rssi, snr, hum, temp)


records_st = st.builds(
    UplinkRecord,
    ts=st.integers(1, 2**40),
    gateway_id=st.sampled_from(["gw1", "gw2", "gateway-ü"]),
    rssi=st.floats(-200, 0),
    snr=st.floats(-30, 30),
    soil_humidity=st.none() | st.floats(0, 100),
    soil_temp=st.none() | st.floats(-40, 80),
)


class TestUplinkRecord:
    @pytest.mark.parametrize("kw", [
        {"rssi": 1.0}, {"rssi": -200.5}, {"snr": 30.01}, {"snr": -31.0},
        {"hum": -0.1}, {"hum": 100.1}, {"ts": 0}, {"ts": -5},
    ])
    def test_range_invariants(self, kw):
        with pytest.raises(ValidationError):
            rec(**kw)

    def test_bounds_inclusive(self):
        rec(rssi=-200.0, snr=30.0, hum=100.0)
        rec(rssi=0.0, snr=-30.0, hum=0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            rec(rssi=float("nan"))


class TestParseCsv:
    def test_header_only_gives_empty_set(self):
        rs = parse_uplink_csv(HEADER)
        assert len(rs) == 0 and rs.gateways == ()

    def test_single_row_maps_all_fields(self):
        rs = parse_uplink_csv(HEADER + "1735689600,gw1,-95.0,5.5,31.0,12.0\n")
        assert rs.records == (UplinkRecord(1735689600, "gw1", -95.0, 5.5, 31.0, 12.0),)

    def test_equal_ts_tie_break_on_gateway(self):
        rs = parse_uplink_csv(HEADER + "100,gw2,-90,1,,\n100,gw1,-91,2,,\n")
        assert [r.gateway_id for r in rs.records] == ["gw1", "gw2"]
        assert rs.gateways == ("gw1", "gw2")

    def test_empty_cells_become_absent(self):
        (r,) = parse_uplink_csv(HEADER + "5,gw1,-90,1,,\n").records
        assert r.soil_humidity is None and r.soil_temp is None

    def test_wrong_header(self):
        with pytest.raises(ParseError) as exc:
            parse_uplink_csv("ts,gw,rssi\n1,gw1,-90\n")
        assert exc.value.line == 1

    def test_malformed_row_carries_line(self):
        with pytest.raises(ParseError) as exc:
            parse_uplink_csv(HEADER + "5,gw1,-90,1,,\n6,gw1,abc,1,,\n")
        assert exc.value.line == 3
        assert "rssi_dbm" in str(exc.value)

    def test_short_row(self):
        with pytest.raises(ParseError) as exc:
            parse_uplink_csv(HEADER + "5,gw1,-90\n")
        assert exc.value.line == 2

    def test_out_of_range_names_field_and_line(self):
        with pytest.raises(ValidationError) as exc:
            parse_uplink_csv(HEADER + "5,gw1,-90,1,,\n6,gw1,-90,1,140,\n")
        msg = str(exc.value)
        assert "line 3" in msg and "soil_humidity" in msg

    @given(st.lists(records_st, max_size=20), st.randoms(use_true_random=False))
    @settings(max_examples=50, deadline=None)
    def test_order_normalizing(self, recs, rnd):
        text = format_uplink_csv(RecordSet(tuple(recs), ()))
        lines = text.splitlines()
        body = lines[1:]
        rnd.shuffle(body)
        shuffled = parse_uplink_csv("\n".join([lines[0]] + body) + "\n")
        assert shuffled == parse_uplink_csv(text)
        keys = [(r.ts, r.gateway_id) for r in shuffled.records]
        assert keys == sorted(keys)

    @given(st.lists(records_st, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_csv_round_trip(self, recs):
        rs = RecordSet.from_records(recs)
        assert parse_uplink_csv(format_uplink_csv(rs)) == rs


class TestDecodeJson:
    def test_optional_absent(self):
        r = decode_uplink_json('{"ts":1735689600,"gw":"gw1","rssi":-95,"snr":5.5}')
        assert r == UplinkRecord(1735689600, "gw1", -95.0, 5.5)
        assert r.soil_humidity is None and r.soil_temp is None

    def test_fully_populated(self):
        r = decode_uplink_json('{"ts":1735689600,"gw":"gw1","rssi":-95,"snr":5.5,"hum":31.0,"temp":12.0}')
        assert r == rec()

    def test_missing_ts(self):
        with pytest.raises(DecodeError, match="'ts'"):
            decode_uplink_json('{"gw":"gw1","rssi":-95,"snr":5.5}')

    @pytest.mark.parametrize("bad", ['"-95"', "true", "null", "[1]"])
    def test_non_numeric_rssi(self, bad):
        with pytest.raises(DecodeError):
            decode_uplink_json('{"ts":1,"gw":"gw1","rssi":%s,"snr":5.5}' % bad)

    def test_not_json(self):
        with pytest.raises(DecodeError):
            decode_uplink_json("{ts:1")

    def test_range_checked(self):
        with pytest.raises(ValidationError):
            decode_uplink_json('{"ts":1,"gw":"gw1","rssi":5,"snr":5.5}')

    def test_stream_skips_blank_and_reports_line(self):
        ok = '{"ts":2,"gw":"gw1","rssi":-95,"snr":5.5}\n\n{"ts":1,"gw":"gw1","rssi":-90,"snr":5.5}\n'
        rs = decode_uplink_stream(ok.splitlines())
        assert [r.ts for r in rs.records] == [1, 2]
        with pytest.raises(DecodeError, match="line 2"):
            decode_uplink_stream([ok.splitlines()[0], '{"gw":"x"}'])

    @given(records_st)
    @settings(max_examples=100)
    def test_encode_decode_round_trip(self, r):
        assert decode_uplink_json(encode_uplink_json(r)) == r


class TestStore:
    def test_three_record_round_trip(self, tmp_path):
        rs = RecordSet.from_records([rec(ts=3), rec(ts=1, gw="gw2", hum=None), rec(ts=2, temp=None)])
        store_save(rs, tmp_path / "s.swv")
        assert store_load(tmp_path / "s.swv") == rs

    def test_empty_round_trip(self, tmp_path):
        rs = RecordSet.from_records([])
        store_save(rs, tmp_path / "e.swv")
        assert store_load(tmp_path / "e.swv") == rs

    def test_unknown_version_v99(self, tmp_path):
        p = tmp_path / "v.swv"
        store_save(RecordSet.from_records([rec()]), p)
        data = bytearray(p.read_bytes())
        struct.pack_into("<H", data, 4, 99)
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="v99"):
            store_load(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.swv"
        p.write_bytes(b"XXXX\x01\x00")
        with pytest.raises(FormatError):
            store_load(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.swv"
        store_save(RecordSet.from_records([rec(), rec(ts=9)]), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            store_load(p)

    def test_missing_file_is_storage_error(self, tmp_path):
        with pytest.raises(StorageError):
            store_load(tmp_path / "nope.swv")

    @given(st.lists(records_st, max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_bit_exact(self, tmp_path_factory, recs):
        rs = RecordSet.from_records(recs)
        p = tmp_path_factory.mktemp("rt") / "x.swv"
        store_save(rs, p)
        back = store_load(p)
        assert back == rs
        for a, b in zip(back.records, rs.records):
            assert struct.pack("<dd", a.rssi, a.snr) == struct.pack("<dd", b.rssi, b.snr)

    def test_concurrent_saves_leave_a_valid_file(self, tmp_path):
        p = tmp_path / "c.swv"
        sets = [RecordSet.from_records([rec(ts=k + 1)] * (k + 1)) for k in range(8)]
        threads = [threading.Thread(target=store_save, args=(s, p)) for s in sets]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert store_load(p) in sets

    @pytest.mark.parametrize("name", ["r.csv", "r.jsonl", "r.swv"])
    def test_load_save_by_extension(self, tmp_path, name):
        rs = RecordSet.from_records([rec(), rec(ts=7, gw="gw2", hum=None, temp=None)])
        save_records(rs, tmp_path / name)
        assert load_records(tmp_path / name) == rs
