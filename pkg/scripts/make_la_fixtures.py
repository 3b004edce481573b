#!/usr/bin/env python3
"""Regenerate the January 2025 Los Angeles fixture set.

Everything here is deterministic (fixed seed, fixed pixels) so the
checked-in fixtures can be rebuilt byte for byte.  Run from anywhere:

    python3 scripts/make_la_fixtures.py [--out fixtures/la2025]
"""

from __future__ import annotations

import argparse
import json
import random
import struct
import zlib
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_OUT = REPO_ROOT / "fixtures" / "la2025"

GDELT_COLUMNS = 61


# ---------------------------------------------------------------------------
# Minimal grayscale PNG writer (8-bit, no filtering beyond per-row None)

def write_png(path: Path, width: int, height: int, pixel) -> None:
    def chunk(tag: bytes, body: bytes) -> bytes:
        return (
            struct.pack(">I", len(body))
            + tag
            + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
        )

    raw = b"".join(
        b"\x00" + bytes(pixel(x, y) for x in range(width)) for y in range(height)
    )
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    data = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )
    path.write_bytes(data)


def sky_gradient(x: int, y: int) -> int:
    return min(255, 40 + y * 6)


def plume(cx: int, cy: int, spread: int):
    def pixel(x: int, y: int) -> int:
        base = sky_gradient(x, y)
        if abs(x - cx) <= spread and y <= cy:
            return max(0, base - 90 + abs(x - cx) * 8)
        return base
    return pixel


# ---------------------------------------------------------------------------
# Source payloads

def gdelt_row(event_id: str, day: str, actor1: str, actor2: str, code: str,
              place: str, lat: str, lon: str, added: str, url: str) -> str:
    row = [""] * GDELT_COLUMNS
    row[0] = event_id
    row[1] = day
    row[6] = actor1
    row[16] = actor2
    row[26] = code
    row[52] = place
    row[56] = lat
    row[57] = lon
    row[59] = added
    row[60] = url
    return "\t".join(row)


def write_gdelt(out: Path) -> None:
    rows = [
        gdelt_row(
            "1370000001", "20250107", "LOS ANGELES FIRE DEPARTMENT", "", "073",
            "Los Angeles, California, United States", "34.0522", "-118.2437",
            "20250107190000",
            "https://news.example.com/2025/01/07/los-angeles-wildfires-state-of-emergency",
        ),
        gdelt_row(
            "1370000002", "20250107", "LA FIRE DEPT", "", "073",
            "Pacific Palisades, California, United States", "34.0722", "-118.5443",
            "20250107190500",
            "https://news.example.com/2025/01/07/palisades-fire-evacuations",
        ),
        gdelt_row(
            "1370000003", "20250107", "CALIFORNIA GOVERNOR", "", "112",
            "Los Angeles, California, United States", "34.0522", "-118.2437",
            "20250107191000",
            "https://wire.example.net/stories/2025-pacific-palisades-wildfire-grows",
        ),
        gdelt_row(
            "1370000004", "20250107", "RESCUE CREW", "", "036",
            "Sacramento, California, United States", "38.5816", "-121.4944",
            "20250107191500",
            "https://news.example.com/2025/01/07/sacramento-river-rescue",
        ),
    ]
    (out / "gdelt").mkdir(parents=True, exist_ok=True)
    (out / "gdelt" / "20250107191500.export.csv").write_text(
        "\n".join(rows) + "\n", encoding="utf-8"
    )


def write_pems(out: Path) -> None:
    rows = [
        "2025-01-07T19:20:00Z,717822,District 7,34.0407,-118.2468,58.4,0.12",
        "2025-01-07T19:20:00Z,718204,District 7,34.0522,-118.4437,41.7,0.21",
        "2025-01-07T19:20:00Z,716339,District 7,34.0195,-118.4912,12.3,0.47",
        "2025-01-07T19:20:00Z,717045,District 7,34.1478,-118.1445,63.8,0.09",
    ]
    (out / "pems").mkdir(parents=True, exist_ok=True)
    (out / "pems" / "d07_text_station_5min_2025_01_07.csv").write_text(
        "\n".join(rows) + "\n", encoding="utf-8"
    )


def write_cctv(out: Path) -> None:
    cctv = out / "cctv"
    frames = cctv / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    write_png(frames / "axis-pch-04_193000.png", 32, 24, plume(10, 14, 4))
    (frames / "axis-pch-04_193000.png.tags").write_text(
        "smoke plume on ridge, heavy haze\n", encoding="utf-8"
    )
    write_png(frames / "axis-sunset-11_193200.png", 32, 24, plume(22, 18, 6))
    (frames / "axis-sunset-11_193200.png.tags").write_text(
        "dense smoke drifting over roadway\n", encoding="utf-8"
    )
    write_png(frames / "axis-dtla-02_193400.png", 32, 24, sky_gradient)
    manifest = [
        "2025-01-07T19:30:00Z,axis-pch-04,34.0419,-118.5237,cctv/frames/axis-pch-04_193000.png",
        "2025-01-07T19:32:00Z,axis-sunset-11,34.0775,-118.5090,cctv/frames/axis-sunset-11_193200.png",
        "2025-01-07T19:34:00Z,axis-dtla-02,34.0489,-118.2529,cctv/frames/axis-dtla-02_193400.png",
    ]
    (cctv / "manifest_20250107.csv").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def write_weather(out: Path) -> None:
    doc = {
        "stations": [
            {
                "id": "KLAX",
                "name": "Los Angeles International Airport",
                "at": "2025-01-07T20:00:00Z",
                "lat": 33.9382,
                "lon": -118.3866,
                "windSpeed": 18.4,
                "windGust": 27.9,
                "humidity": 8.0,
                "temperature": 21.3,
                "pressure": 1012.0,
                "description": "Extreme Santa Ana wind event, red flag warning in effect",
            }
        ]
    }
    (out / "weather").mkdir(parents=True, exist_ok=True)
    (out / "weather" / "conditions_20250107T2000.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def write_airquality(out: Path) -> None:
    aq = out / "airquality"
    aq.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20250107)
    hours = []
    for h in range(19, 24):
        hours.append(("2025-01-06", h))
    for h in range(0, 21):
        hours.append(("2025-01-07", h))
    for day, hour in hours:
        value = round(rng.uniform(11.4, 12.6), 1)
        stamp = f"{day}T{hour:02d}:00:00Z"
        _write_aq_file(aq, stamp, value)
    _write_aq_file(aq, "2025-01-07T21:00:00Z", 143.2)


def _write_aq_file(aq: Path, stamp: str, value: float) -> None:
    doc = {
        "sensors": [
            {
                "sensor_index": 98211,
                "name": "Topanga Canyon",
                "last_seen": stamp,
                "latitude": 34.0581,
                "longitude": -118.5301,
                "pm2.5": value,
            }
        ]
    }
    name = "sensors_" + stamp.replace("-", "").replace(":", "").replace("Z", "Z.json")
    (aq / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


STUB_RULES = """\
# keyword<TAB>effect[;effect...]   effects: kind:arg1|arg2
# actor/event/cap/incident feed text parsing; caption feeds image
# captioning; link feeds cross-modal linking; same/partof steer
# incident merges and asame steers actor merges.
los angeles wildfires\tincident:2025 Los Angeles Wildfires|Multiple wind-driven wildfires burning across Los Angeles County.
palisades fire\tincident:Palisades Fire|Fast-moving brush blaze in the Pacific Palisades area.;partof:2025 Los Angeles Wildfires
pacific palisades wildfire\tincident:2025 Pacific Palisades Wildfire|Wildfire burning in the Pacific Palisades neighborhood of Los Angeles.;same:Palisades Fire
fire department\tactor:Los Angeles Fire Department|GOV;cap:Fire;event:073|Los Angeles Fire Department
la fire dept\tactor:LA Fire Dept|GOV;cap:Fire;event:073|LA Fire Dept;asame:Los Angeles Fire Department
smoke\tcaption:Thick smoke plume rising over the hillside;link:Palisades Fire
anomalous\tlink:Palisades Fire
"""

CONFIG = """\
# January 2025 Los Angeles replay scenario.
backend: stub
stub_rules: stub_rules.tsv
top_k: 5
sources:
  - name: gdelt
    format: gdelt
    poll_interval: 15m
    input: "gdelt/*.csv"
    incident_source: true
    region: &la
      place: Los Angeles
      lat: 34.05
      lon: -118.24
      radius_km: 80
  - name: pems
    format: pems
    poll_interval: 1d
    input: "pems/*.csv"
    region: *la
  - name: cctv
    format: image_manifest
    poll_interval: 15m
    input: "cctv/manifest_*.csv"
    region: *la
  - name: weather
    format: weather
    poll_interval: 1h
    input: "weather/*.json"
    region: *la
  - name: airquality
    format: airquality
    poll_interval: 1h
    input: "airquality/*.json"
    region: *la
"""


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(DEFAULT_OUT))
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_gdelt(out)
    write_pems(out)
    write_cctv(out)
    write_weather(out)
    write_airquality(out)
    (out / "stub_rules.tsv").write_text(STUB_RULES, encoding="utf-8")
    (out / "config.yaml").write_text(CONFIG, encoding="utf-8")
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
