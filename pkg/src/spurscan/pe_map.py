"""PE parsing and the byte-region partition used to slice attributions.

Only the on-disk layout matters here: DOS area, PE headers, section raw data,
the slack between/after section contents, and the overlay. Everything is in
raw file offsets.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import NotPe, Truncated

MZ_MAGIC = b"MZ"
PE_MAGIC = b"PE\x00\x00"
IMAGE_SCN_MEM_EXECUTE = 0x20000000

DOS_HEADER_LEN = 0x40
COFF_HEADER_LEN = 20
SECTION_HEADER_LEN = 40
# SizeOfHeaders sits at the same offset in PE32 and PE32+ optional headers.
OPT_SIZE_OF_HEADERS = 60


class RegionKind(str, enum.Enum):
    DOS = "dos"
    PE_HEADERS = "pe_headers"
    CONTENT = "content"  # raw content of every section, code section included
    SLACK = "slack"
    OVERLAY = "overlay"
    CODE = "code"  # content of the first executable section only


# The five kinds that partition a file. CODE is a subset of CONTENT.
PARTITION_KINDS = (
    RegionKind.DOS,
    RegionKind.PE_HEADERS,
    RegionKind.CONTENT,
    RegionKind.SLACK,
    RegionKind.OVERLAY,
)


@dataclass(frozen=True, order=True)
class ByteInterval:
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"bad interval [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def clip(self, limit: int) -> "ByteInterval":
        return ByteInterval(min(self.start, limit), min(self.end, limit))


@dataclass(frozen=True)
class SectionEntry:
    name: bytes
    ptr_raw: int
    size_raw: int
    virtual_size: int
    characteristics: int

    @property
    def is_executable(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_MEM_EXECUTE)

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\x00").decode("latin-1")


@dataclass(frozen=True)
class PeLayout:
    e_lfanew: int
    size_of_headers: int
    sections: tuple[SectionEntry, ...]
    file_len: int
    malformed: bool = False


@dataclass(frozen=True)
class RegionMap:
    file_len: int
    dos: tuple[ByteInterval, ...]
    pe_headers: tuple[ByteInterval, ...]
    content: tuple[tuple[ByteInterval, ...], ...]  # one entry per section
    slack: tuple[ByteInterval, ...]
    overlay: tuple[ByteInterval, ...]
    code_section_index: Optional[int] = None
    malformed: bool = False

    def intervals(self, kind: RegionKind | str) -> list[ByteInterval]:
        """Sorted intervals of one region kind."""
        kind = RegionKind(kind)
        if kind is RegionKind.DOS:
            out = list(self.dos)
        elif kind is RegionKind.PE_HEADERS:
            out = list(self.pe_headers)
        elif kind is RegionKind.CONTENT:
            out = [iv for sec in self.content for iv in sec]
        elif kind is RegionKind.SLACK:
            out = list(self.slack)
        elif kind is RegionKind.OVERLAY:
            out = list(self.overlay)
        else:
            if self.code_section_index is None:
                return []
            out = list(self.content[self.code_section_index])
        return sorted(iv for iv in out if len(iv))

    def labelled(self) -> list[tuple[str, ByteInterval]]:
        """Every non-empty interval with a kind label, sorted by offset.

        Content of the code section is labelled ``code``, other section
        content ``content``.
        """
        out = []
        for kind in (RegionKind.DOS, RegionKind.PE_HEADERS, RegionKind.SLACK, RegionKind.OVERLAY):
            out += [(kind.value, iv) for iv in self.intervals(kind)]
        for idx, sec in enumerate(self.content):
            label = "code" if idx == self.code_section_index else "content"
            out += [(label, iv) for iv in sec if len(iv)]
        out.sort(key=lambda t: (t[1].start, t[1].end))
        return out

    def to_json(self) -> dict:
        return {
            "file_len": self.file_len,
            "malformed": self.malformed,
            "regions": [
                {"kind": kind, "start": iv.start, "end": iv.end}
                for kind, iv in self.labelled()
            ],
            "code_section": self.code_section_index,
        }


def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def parse_pe(data: bytes) -> PeLayout:
    """Read the header offsets and section table of a PE file.

    Raises NotPe when the MZ or PE signature is missing and Truncated when the
    file ends inside a structure the headers claim. Hostile-but-readable
    layouts (overlapping sections, spans past EOF) are clamped and flagged as
    malformed instead.
    """
    n = len(data)
    if n < 2:
        raise Truncated(f"{n} bytes is too short for a DOS header")
    if data[:2] != MZ_MAGIC:
        raise NotPe("missing MZ signature")
    if n < DOS_HEADER_LEN:
        raise Truncated(f"{n} bytes is too short for a DOS header")

    e_lfanew = _u32(data, 0x3C)
    if e_lfanew < DOS_HEADER_LEN:
        raise NotPe(f"e_lfanew 0x{e_lfanew:x} points inside the DOS header")
    if e_lfanew + 4 > n:
        raise Truncated(f"e_lfanew 0x{e_lfanew:x} points past end of file")
    if data[e_lfanew:e_lfanew + 4] != PE_MAGIC:
        raise NotPe("missing PE signature")

    coff = e_lfanew + 4
    if coff + COFF_HEADER_LEN > n:
        raise Truncated("COFF header cut short")
    n_sections = _u16(data, coff + 2)
    opt_size = _u16(data, coff + 16)
    opt = coff + COFF_HEADER_LEN
    table = opt + opt_size
    table_end = table + n_sections * SECTION_HEADER_LEN
    if table_end > n:
        raise Truncated(f"section table ({n_sections} entries) runs past end of file")

    malformed = False
    if opt_size >= OPT_SIZE_OF_HEADERS + 4:
        declared_headers = _u32(data, opt + OPT_SIZE_OF_HEADERS)
    else:
        declared_headers = table_end
        malformed = True
    size_of_headers = max(declared_headers, table_end)
    if declared_headers < table_end or size_of_headers > n:
        malformed = True
    size_of_headers = min(size_of_headers, n)

    sections = []
    for i in range(n_sections):
        off = table + i * SECTION_HEADER_LEN
        name = bytes(data[off:off + 8])
        vsize, _va, size_raw, ptr_raw = struct.unpack_from("<IIII", data, off + 8)
        characteristics = _u32(data, off + 36)
        start = min(ptr_raw, n)
        end = min(ptr_raw + size_raw, n)
        if ptr_raw + size_raw > n:
            malformed = True
        sections.append(SectionEntry(name, start, end - start, vsize, characteristics))

    spans = sorted((s.ptr_raw, s.ptr_raw + s.size_raw) for s in sections if s.size_raw)
    for (_, a_end), (b_start, _) in zip(spans, spans[1:]):
        if b_start < a_end:
            malformed = True
    if spans and spans[0][0] < size_of_headers:
        malformed = True

    return PeLayout(e_lfanew, size_of_headers, tuple(sections), n, malformed)


def code_section(layout: PeLayout) -> Optional[int]:
    """Index of the first executable section in table order, if any."""
    for i, sec in enumerate(layout.sections):
        if sec.is_executable:
            return i
    return None


def _subtract(iv: ByteInterval, taken: Sequence[ByteInterval]) -> list[ByteInterval]:
    """Parts of ``iv`` not covered by the sorted, disjoint ``taken`` list."""
    out = []
    cur = iv.start
    for t in taken:
        if t.end <= cur:
            continue
        if t.start >= iv.end:
            break
        if t.start > cur:
            out.append(ByteInterval(cur, t.start))
        cur = max(cur, t.end)
    if cur < iv.end:
        out.append(ByteInterval(cur, iv.end))
    return out


def _merge(ivs: Iterable[ByteInterval]) -> list[ByteInterval]:
    out: list[ByteInterval] = []
    for iv in sorted(i for i in ivs if len(i)):
        if out and iv.start <= out[-1].end:
            out[-1] = ByteInterval(out[-1].start, max(out[-1].end, iv.end))
        else:
            out.append(iv)
    return out


def region_map(layout: PeLayout) -> RegionMap:
    """Partition ``[0, file_len)`` into DOS, headers, section content, slack
    and overlay.

    Bytes are claimed in priority order: DOS area, PE headers, then sections
    in table order (an earlier section wins bytes contested by a later one).
    Whatever remains before the overlay is slack.
    """
    n = layout.file_len
    dos = ByteInterval(0, min(layout.e_lfanew, n))
    headers = ByteInterval(dos.end, max(dos.end, min(layout.size_of_headers, n)))
    taken = _merge([dos, headers])

    content = []
    raw_end = headers.end
    for sec in layout.sections:
        if sec.size_raw == 0:
            content.append(())
            continue
        raw_end = max(raw_end, sec.ptr_raw + sec.size_raw)
        used = sec.size_raw if sec.virtual_size == 0 else min(sec.virtual_size, sec.size_raw)
        want = ByteInterval(sec.ptr_raw, sec.ptr_raw + used)
        got = _subtract(want, taken)
        content.append(tuple(got))
        taken = _merge(taken + got)

    overlay_start = min(raw_end, n)
    overlay = (ByteInterval(overlay_start, n),) if overlay_start < n else ()
    slack = _subtract(ByteInterval(0, overlay_start), taken)

    return RegionMap(
        file_len=n,
        dos=(dos,) if len(dos) else (),
        pe_headers=(headers,) if len(headers) else (),
        content=tuple(content),
        slack=tuple(slack),
        overlay=overlay,
        code_section_index=code_section(layout),
        malformed=layout.malformed,
    )


def map_bytes(data: bytes) -> RegionMap:
    return region_map(parse_pe(data))


def select(attr: np.ndarray, rmap: RegionMap, kind: RegionKind | str, window: int) -> np.ndarray:
    """Concatenate ``attr`` values at offsets of one region kind, inside the window."""
    limit = min(window, len(attr))
    parts = []
    for iv in rmap.intervals(kind):
        iv = iv.clip(limit)
        if len(iv):
            parts.append(attr[iv.start:iv.end])
    if not parts:
        return attr[:0].copy()
    return np.concatenate(parts)


def tag_bytes(rmap: RegionMap, kinds: Sequence[RegionKind] = PARTITION_KINDS) -> np.ndarray:
    """Per-offset index into ``kinds`` (-1 if untagged). Later kinds overwrite."""
    tags = np.full(rmap.file_len, -1, dtype=np.int16)
    for k, kind in enumerate(kinds):
        for iv in rmap.intervals(kind):
            tags[iv.start:iv.end] = k
    return tags
