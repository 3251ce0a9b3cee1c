from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

from spurscan.synth import FixtureSpec, SectionSpec

DATA = Path(__file__).parent / "data"

# criterion lines collected by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_fixture_spec(rng: np.random.Generator) -> FixtureSpec:
    """Random but consistent layout: 0-4 sections, gaps, raw/virtual size mismatches."""
    n_sec = int(rng.integers(0, 5))
    e_lfanew = int(rng.integers(0x40, 0x180)) & ~0x7
    e_lfanew = max(e_lfanew, 0x40)
    table_end = e_lfanew + 4 + 20 + 224 + 40 * n_sec
    size_of_headers = table_end + int(rng.integers(0, 0x200))
    sections = []
    cur = size_of_headers
    for i in range(n_sec):
        cur += int(rng.choice([0, 0, int(rng.integers(1, 0x100))]))
        size_raw = int(rng.choice([0, int(rng.integers(1, 0x400))]))
        vs_mode = rng.integers(0, 4)
        if vs_mode == 0:
            vsize = 0
        elif vs_mode == 1:
            vsize = size_raw + int(rng.integers(0, 0x100))
        else:
            vsize = int(rng.integers(0, size_raw + 1))
        sections.append(SectionSpec(f".s{i}", cur, size_raw, vsize, bool(rng.integers(0, 2))))
        cur += size_raw
    return FixtureSpec(e_lfanew, size_of_headers, tuple(sections), int(rng.integers(0, 0x300)))


@st.composite
def fixture_specs(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_fixture_spec(np.random.default_rng(seed))


@pytest.fixture(scope="session")
def golden_bytes():
    return (DATA / "example_fixture.bin").read_bytes()


def oracle_ratios(spec: FixtureSpec, values, window: int) -> dict:
    """Brute-force region ratios: tag every byte from the fixture's own layout,
    then accumulate squared values one position at a time."""
    regions = spec.expected_regions()
    tag = {}
    for name in ("dos", "slack", "overlay", "code"):
        for iv in regions[name]:
            for off in range(iv.start, iv.end):
                tag[off] = name
    n = min(len(values), window)
    acc = {"dos": 0.0, "slack": 0.0, "overlay": 0.0, "code": 0.0}
    total = 0.0
    for off in range(n):
        v = float(values[off]) ** 2
        total += v
        if off in tag:
            acc[tag[off]] += v
    if total == 0.0:
        return None
    return {"r_dos": acc["dos"] / total, "r_slack": acc["slack"] / total,
            "r_overlay": acc["overlay"] / total, "r_text": acc["code"] / total}


@pytest.fixture(scope="session")
def toy_slack_model():
    """Toy MalConv trained on the slack-planted corpus (100 files per class, 30 epochs)."""
    from spurscan.synth import PlantSpec, gen_dataset, toy_config, toy_template, train_toy
    samples = gen_dataset(100, toy_template(), PlantSpec("slack", 1.0), seed=0)
    return train_toy(toy_config("malconv"), samples, epochs=30, seed=0)
