"""Regenerate the golden fixture used by the tests and cross-check it with pefile.

    python scripts/make_golden.py
"""

import json
from pathlib import Path

import pefile

from spurscan.pe_map import map_bytes
from spurscan.synth import example_fixture_spec, make_fixture

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def main():
    data = make_fixture(example_fixture_spec(), seed=0)
    pe = pefile.PE(data=data)
    sec = pe.sections[0]
    assert pe.DOS_HEADER.e_lfanew == 0x80
    assert pe.OPTIONAL_HEADER.SizeOfHeaders == 0x200
    assert (sec.PointerToRawData, sec.SizeOfRawData, sec.Misc_VirtualSize) == (0x200, 0x200, 0x180)
    assert pe.get_overlay_data_start_offset() == 0x400
    assert len(data) == 0x500

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "example_fixture.bin").write_bytes(data)
    (OUT / "example_fixture.map.json").write_text(json.dumps(map_bytes(data).to_json()) + "\n")
    print(f"wrote {OUT}/example_fixture.bin ({len(data)} bytes)")


if __name__ == "__main__":
    main()
