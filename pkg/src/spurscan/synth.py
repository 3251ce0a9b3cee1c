"""Synthetic PE fixtures with planted byte markers, and a toy trainer.

Fixtures are format-valid minimal PE32 images (they parse, they do not run).
A PlantSpec drops a fixed 16-byte marker into one region with a chosen
correlation to the label, so it is known by construction which region a
trained model *should* be relying on.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import Diverged, InconsistentSpec
from .nn import (
    ModelConfig,
    WeightStore,
    backward,
    init_weights,
    malware_score,
    predict,
)
from .pe_map import (
    COFF_HEADER_LEN,
    DOS_HEADER_LEN,
    SECTION_HEADER_LEN,
    ByteInterval,
)

log = logging.getLogger(__name__)

MARKER = bytes.fromhex("5350555249f04d41524b45520fc3a55a")
OPT_HEADER_LEN = 224  # PE32 with 16 data directories
FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
SCN_CODE = 0x60000020  # code | execute | read
SCN_DATA = 0xC0000040  # initialized data | read | write


@dataclass(frozen=True)
class SectionSpec:
    name: str
    ptr_raw: int
    size_raw: int
    virtual_size: int
    executable: bool = False


@dataclass(frozen=True)
class FixtureSpec:
    e_lfanew: int = 0x80
    size_of_headers: int = 0x200
    sections: tuple[SectionSpec, ...] = ()
    overlay_len: int = 0
    # per-region fill: "random" (uniform bytes) or "zero"; keys are region kind names
    fill: Mapping[str, str] = field(default_factory=lambda: {
        "dos": "random", "content": "random", "slack": "random", "overlay": "random"})

    @property
    def raw_end(self) -> int:
        return max([self.size_of_headers] + [s.ptr_raw + s.size_raw for s in self.sections if s.size_raw])

    @property
    def file_len(self) -> int:
        return self.raw_end + self.overlay_len

    def validate(self) -> None:
        if self.e_lfanew < DOS_HEADER_LEN:
            raise InconsistentSpec("e_lfanew must be >= 0x40")
        table_end = self.e_lfanew + 4 + COFF_HEADER_LEN + OPT_HEADER_LEN + SECTION_HEADER_LEN * len(self.sections)
        if table_end > self.size_of_headers:
            raise InconsistentSpec(f"headers need 0x{table_end:x} bytes, size_of_headers is 0x{self.size_of_headers:x}")
        if self.overlay_len < 0:
            raise InconsistentSpec("negative overlay")
        spans = sorted((s.ptr_raw, s.ptr_raw + s.size_raw) for s in self.sections if s.size_raw)
        if spans and spans[0][0] < self.size_of_headers:
            raise InconsistentSpec("section raw data overlaps the headers")
        for (_, a_end), (b_start, _) in zip(spans, spans[1:]):
            if b_start < a_end:
                raise InconsistentSpec("section raw spans overlap")
        for s in self.sections:
            if min(s.ptr_raw, s.size_raw, s.virtual_size) < 0:
                raise InconsistentSpec(f"negative field in section {s.name}")
            if len(s.name.encode()) > 8:
                raise InconsistentSpec(f"section name {s.name!r} longer than 8 bytes")
        for kind, policy in self.fill.items():
            if policy not in ("random", "zero"):
                raise InconsistentSpec(f"unknown fill policy {policy!r} for {kind}")

    def expected_regions(self) -> dict[str, list[ByteInterval]]:
        """Intervals the region mapper must recover, derived from the layout description alone."""
        n = self.file_len
        out = {"dos": [ByteInterval(0, self.e_lfanew)],
               "pe_headers": [ByteInterval(self.e_lfanew, self.size_of_headers)],
               "content": [], "code": [], "slack": [], "overlay": []}
        claimed = [(0, self.size_of_headers)]
        code_idx = next((i for i, s in enumerate(self.sections) if s.executable), None)
        for i, s in enumerate(self.sections):
            used = s.size_raw if s.virtual_size == 0 else min(s.size_raw, s.virtual_size)
            if not used:
                continue
            iv = ByteInterval(s.ptr_raw, s.ptr_raw + used)
            out["content"].append(iv)
            claimed.append((iv.start, iv.end))
            if i == code_idx:
                out["code"].append(iv)
        claimed.sort()
        cur = 0
        for a, b in claimed:
            if a > cur:
                out["slack"].append(ByteInterval(cur, a))
            cur = max(cur, b)
        if cur < self.raw_end:
            out["slack"].append(ByteInterval(cur, self.raw_end))
        if self.overlay_len:
            out["overlay"].append(ByteInterval(self.raw_end, n))
        for k in out:
            out[k].sort()
        return out


def _align(v: int, a: int) -> int:
    return (v + a - 1) // a * a


def _headers(spec: FixtureSpec) -> bytes:
    """PE signature, COFF header, PE32 optional header and section table."""
    vas = []
    va = SECTION_ALIGNMENT
    for s in spec.sections:
        vas.append(va)
        va = _align(va + max(s.virtual_size, s.size_raw, 1), SECTION_ALIGNMENT)
    size_of_image = va
    code = [s for s in spec.sections if s.executable]
    entry = vas[spec.sections.index(code[0])] if code else 0

    coff = struct.pack("<HHIIIHH", 0x14C, len(spec.sections), 0, 0, 0, OPT_HEADER_LEN, 0x0102)
    opt = struct.pack(
        "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII",
        0x10B, 14, 0,                                  # magic, linker version
        sum(s.size_raw for s in code), 0, 0,           # SizeOfCode/InitializedData/UninitializedData
        entry, entry, 0,                               # entry point, BaseOfCode, BaseOfData
        0x400000, SECTION_ALIGNMENT, FILE_ALIGNMENT,
        6, 0, 0, 0, 6, 0,                              # OS / image / subsystem versions
        0, size_of_image, spec.size_of_headers, 0,     # Win32VersionValue, SizeOfImage, SizeOfHeaders, CheckSum
        2, 0,                                          # subsystem GUI, DllCharacteristics
        0x100000, 0x1000, 0x100000, 0x1000, 0, 16,     # stack/heap reserve+commit, LoaderFlags, NumberOfRvaAndSizes
    )
    opt += bytes(8 * 16)
    assert len(opt) == OPT_HEADER_LEN
    table = b""
    for s, va in zip(spec.sections, vas):
        table += struct.pack("<8sIIIIIIHHI", s.name.encode(), s.virtual_size, va, s.size_raw,
                             s.ptr_raw, 0, 0, 0, 0, SCN_CODE if s.executable else SCN_DATA)
    return b"PE\x00\x00" + coff + opt + table


def make_fixture(spec: FixtureSpec, seed: int = 0) -> bytes:
    """Render ``spec`` to bytes. Region contents follow its fill policy."""
    spec.validate()
    rng = np.random.default_rng(seed)
    buf = bytearray(spec.file_len)
    regions = spec.expected_regions()

    def fill(kind, ivs):
        if spec.fill.get(kind, "zero") != "random":
            return
        for iv in ivs:
            buf[iv.start:iv.end] = rng.integers(0, 256, len(iv), dtype=np.uint8).tobytes()

    fill("dos", regions["dos"])
    fill("content", regions["content"])
    fill("slack", regions["slack"])
    fill("overlay", regions["overlay"])

    buf[0:2] = b"MZ"
    struct.pack_into("<I", buf, 0x3C, spec.e_lfanew)
    hdr = _headers(spec)
    buf[spec.e_lfanew:spec.e_lfanew + len(hdr)] = hdr
    buf[spec.e_lfanew + len(hdr):spec.size_of_headers] = bytes(spec.size_of_headers - spec.e_lfanew - len(hdr))
    return bytes(buf)


def toy_template() -> FixtureSpec:
    """4 KiB layout used by the planted-correlation experiments."""
    return FixtureSpec(
        e_lfanew=0x80,
        size_of_headers=0x200,
        sections=(
            SectionSpec(".text", 0x200, 0x600, 0x500, executable=True),
            SectionSpec(".data", 0x800, 0x400, 0x280),
            SectionSpec(".rsrc", 0xC00, 0x200, 0x100),
        ),
        overlay_len=0x200,
    )


def example_fixture_spec() -> FixtureSpec:
    """One section with trailing slack and a 0x100-byte overlay."""
    return FixtureSpec(
        e_lfanew=0x80,
        size_of_headers=0x200,
        sections=(SectionSpec(".text", 0x200, 0x200, 0x180, executable=True),),
        overlay_len=0x100,
    )


# ---------------------------------------------------------------------------
# planted datasets
# ---------------------------------------------------------------------------

PLANT_KINDS = ("dos", "slack", "overlay", "code")


@dataclass(frozen=True)
class PlantSpec:
    region: str  # one of PLANT_KINDS
    p: float = 1.0  # P(marker | correlated class); the other class gets 1 - p
    label: str = "malware"  # class the marker correlates with
    marker: bytes = MARKER
    align: int = 16  # marker start offsets are multiples of this

    def __post_init__(self):
        if self.region not in PLANT_KINDS:
            raise InconsistentSpec(f"cannot plant in {self.region!r}")
        if not 0.5 <= self.p <= 1.0:
            raise InconsistentSpec("p must lie in [0.5, 1]")
        if self.label not in ("goodware", "malware"):
            raise InconsistentSpec(f"bad label {self.label!r}")


@dataclass(frozen=True)
class Sample:
    name: str
    label: str
    data: bytes
    planted: bool = False


def plant_slots(spec: FixtureSpec, region: str, length: int, align: int = 1) -> list[int]:
    """Every ``align``-aligned start offset where a ``length``-byte marker fits
    inside one interval of ``region``."""
    regions = spec.expected_regions()
    if region == "dos":
        # keep MZ and e_lfanew intact: only the stub after the DOS header is free
        ivs = [ByteInterval(DOS_HEADER_LEN, spec.e_lfanew)]
    else:
        ivs = regions[region]
    return [off for iv in ivs for off in range(iv.start, iv.end - length + 1) if off % align == 0]


def gen_dataset(n_per_class: int, template: FixtureSpec, plant: PlantSpec,
                seed: int = 0) -> list[Sample]:
    """Balanced labelled corpus; goodware first, then malware."""
    if n_per_class < 1:
        raise InconsistentSpec("need at least one sample per class")
    slots = plant_slots(template, plant.region, len(plant.marker), plant.align)
    if not slots:
        raise InconsistentSpec(f"marker does not fit in any {plant.region} interval")
    rng = np.random.default_rng(seed)
    out = []
    for label in ("goodware", "malware"):
        prob = plant.p if label == plant.label else 1.0 - plant.p
        for i in range(n_per_class):
            data = bytearray(make_fixture(template, int(rng.integers(2**63))))
            planted = bool(rng.random() < prob)
            if planted:
                off = slots[int(rng.integers(len(slots)))]
                data[off:off + len(plant.marker)] = plant.marker
            out.append(Sample(f"{label}_{i:04d}", label, bytes(data), planted))
    return out


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    weights: WeightStore
    accuracy: float
    losses: list[float]


def _loss_and_grad(cfg: ModelConfig, logits: np.ndarray, y: int):
    if cfg.output == "softmax2":
        z = logits - logits.max()
        p = np.exp(z) / np.exp(z).sum()
        loss = -float(np.log(max(p[y], 1e-300)))
        dz = p.copy()
        dz[y] -= 1.0
    else:
        s = malware_score(cfg, logits)
        loss = -float(np.log(max(s if y else 1.0 - s, 1e-300)))
        dz = np.array([s - y], dtype=logits.dtype)
    return loss, dz


def accuracy(cfg: ModelConfig, weights: WeightStore, samples: Sequence[Sample]) -> float:
    hits = 0
    for s in samples:
        score, _ = predict(cfg, weights, s.data)
        hits += (score >= 0.5) == (s.label == "malware")
    return hits / len(samples)


def train_toy(cfg: ModelConfig, samples: Sequence[Sample], epochs: int = 30, lr: float = 0.05,
              seed: int = 0, batch_size: int = 16, init: Optional[WeightStore] = None) -> TrainResult:
    """Plain mini-batch SGD on cross-entropy (two-way softmax) or binary cross-entropy."""
    for s in samples:
        if len(s.data) > cfg.window:
            raise InconsistentSpec(f"{s.name} ({len(s.data)} bytes) exceeds the window {cfg.window}")
    rng = np.random.default_rng(seed)
    weights = init if init is not None else init_weights(cfg, seed)
    labels = [1 if s.label == "malware" else 0 for s in samples]
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for b0 in range(0, len(order), batch_size):
            batch = order[b0:b0 + batch_size]
            acc = None
            for j in batch:
                _, cache = predict(cfg, weights, samples[j].data)
                loss, dz = _loss_and_grad(cfg, cache.logits, labels[j])
                if not np.isfinite(loss):
                    raise Diverged(f"non-finite loss in epoch {epoch}")
                epoch_loss += loss
                _, g = backward(cache, weights, dz)
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
            grads = {k: v / len(batch) for k, v in acc.items()}
            if lr:
                weights = weights.updated(grads, lr)
        mean_loss = epoch_loss / len(samples)
        if not np.isfinite(mean_loss):
            raise Diverged(f"non-finite loss in epoch {epoch}")
        losses.append(mean_loss)
        log.info("epoch %d loss %.4f", epoch, mean_loss)
    return TrainResult(weights, accuracy(cfg, weights, samples), losses)


def toy_config(arch: str = "malconv") -> ModelConfig:
    from .nn import bbdnn_config, malconv_config
    if arch == "malconv":
        return malconv_config(embed_dim=8, window=4096, channels=(128,), kernels=(32,), strides=(16,))
    return bbdnn_config(embed_dim=8, window=4096, channels=(8, 8, 8, 8, 8), kernels=(4,) * 5,
                        strides=(1,) * 5, pools=(2,) * 5)
