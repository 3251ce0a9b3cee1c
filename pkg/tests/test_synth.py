import numpy as np
import pytest
from hypothesis import given, settings

from conftest import fixture_specs
from spurscan.errors import InconsistentSpec
from spurscan.nn import init_weights
from spurscan.pe_map import ByteInterval, RegionKind, map_bytes, parse_pe
from spurscan.synth import (
    MARKER,
    FixtureSpec,
    PlantSpec,
    SectionSpec,
    accuracy,
    example_fixture_spec,
    gen_dataset,
    make_fixture,
    plant_slots,
    toy_config,
    toy_template,
    train_toy,
)


def test_golden_file_byte_identical(golden_bytes):
    assert make_fixture(example_fixture_spec(), seed=0) == golden_bytes


def test_fixture_reproducible():
    spec = toy_template()
    assert make_fixture(spec, 3) == make_fixture(spec, 3)
    assert make_fixture(spec, 3) != make_fixture(spec, 4)


@settings(max_examples=60, deadline=None)
@given(fixture_specs())
def test_mapper_recovers_spec(spec):
    rmap = map_bytes(make_fixture(spec, 1))
    exp = spec.expected_regions()
    assert rmap.file_len == spec.file_len
    for kind in ("dos", "pe_headers", "slack", "overlay", "code"):
        assert rmap.intervals(kind) == exp[kind], kind
    assert sorted(rmap.intervals(RegionKind.CONTENT)) == exp["content"]


def test_zero_overlay():
    spec = FixtureSpec(sections=(SectionSpec(".text", 0x200, 0x200, 0x200, True),), overlay_len=0)
    assert map_bytes(make_fixture(spec)).intervals("overlay") == []


def test_gap_between_sections_is_slack():
    spec = FixtureSpec(sections=(SectionSpec(".text", 0x200, 0x200, 0x200, True),
                                 SectionSpec(".data", 0x480, 0x100, 0x100)))
    assert ByteInterval(0x400, 0x480) in map_bytes(make_fixture(spec)).intervals("slack")


def test_zero_fill_policy():
    spec = FixtureSpec(sections=(SectionSpec(".text", 0x200, 0x200, 0x100, True),), overlay_len=0x40,
                       fill={"dos": "zero", "content": "random", "slack": "zero", "overlay": "zero"})
    data = make_fixture(spec, 0)
    assert data[0x300:0x400] == bytes(0x100) and data[0x400:] == bytes(0x40)
    assert data[0x40:0x80] == bytes(0x40)


@pytest.mark.parametrize("spec", [
    FixtureSpec(e_lfanew=0x20),
    FixtureSpec(size_of_headers=0x100, sections=(SectionSpec(".a", 0x200, 0x10, 0x10),) * 2),
    FixtureSpec(sections=(SectionSpec(".a", 0x200, 0x200, 0), SectionSpec(".b", 0x300, 0x200, 0))),
    FixtureSpec(sections=(SectionSpec(".a", 0x100, 0x200, 0),)),
    FixtureSpec(overlay_len=-1),
    FixtureSpec(sections=(SectionSpec(".toolongname", 0x200, 0x10, 0),)),
])
def test_inconsistent_specs(spec):
    with pytest.raises(InconsistentSpec):
        make_fixture(spec)


def test_pefile_agrees_on_toy_template():
    pefile = pytest.importorskip("pefile")
    data = make_fixture(toy_template(), 0)
    pe = pefile.PE(data=data)
    layout = parse_pe(data)
    assert [(s.PointerToRawData, s.SizeOfRawData, s.Misc_VirtualSize) for s in pe.sections] == \
        [(s.ptr_raw, s.size_raw, s.virtual_size) for s in layout.sections]
    assert pe.get_overlay_data_start_offset() == 0xE00


@pytest.mark.parametrize("region", ["dos", "slack", "overlay", "code"])
def test_plant_p1(region):
    samples = gen_dataset(20, toy_template(), PlantSpec(region, 1.0), seed=1)
    assert len(samples) == 40
    for s in samples:
        found = s.data.find(MARKER)
        assert (found >= 0) == (s.label == "malware") == s.planted
        if found >= 0:
            rmap = map_bytes(s.data)
            kind = "code" if region == "code" else region
            assert any(iv.start <= found and found + len(MARKER) <= iv.end for iv in rmap.intervals(kind))
            assert found % 16 == 0


def test_plant_keeps_pe_parseable():
    for s in gen_dataset(10, toy_template(), PlantSpec("dos"), seed=2):
        assert map_bytes(s.data).intervals("dos") == [ByteInterval(0, 0x80)]


def test_plant_half_is_label_independent():
    samples = gen_dataset(400, toy_template(), PlantSpec("slack", 0.5), seed=0)
    rate = {lab: np.mean([s.planted for s in samples if s.label == lab]) for lab in ("goodware", "malware")}
    assert abs(rate["goodware"] - 0.5) < 0.08 and abs(rate["malware"] - 0.5) < 0.08


def test_gen_dataset_reproducible():
    a = gen_dataset(5, toy_template(), PlantSpec("overlay"), seed=9)
    b = gen_dataset(5, toy_template(), PlantSpec("overlay"), seed=9)
    assert a == b
    assert [s.name for s in a][:2] == ["goodware_0000", "goodware_0001"]


def test_plant_errors():
    with pytest.raises(InconsistentSpec):
        PlantSpec("headers")
    with pytest.raises(InconsistentSpec):
        PlantSpec("slack", p=0.2)
    tight = FixtureSpec(sections=(SectionSpec(".text", 0x200, 0x200, 0x200, True),))
    assert plant_slots(tight, "slack", 16) == []
    with pytest.raises(InconsistentSpec):
        gen_dataset(2, tight, PlantSpec("slack"))


def test_lr_zero_leaves_weights():
    cfg = toy_config("malconv")
    samples = gen_dataset(4, toy_template(), PlantSpec("slack"), seed=0)
    w0 = init_weights(cfg, 0)
    res = train_toy(cfg, samples, epochs=2, lr=0.0, seed=0, init=w0)
    for k in w0.tensors:
        assert np.array_equal(res.weights.tensors[k], w0.tensors[k])
    assert len(res.losses) == 2


def test_control_dataset_carries_no_signal():
    # the model can memorise the training files; held-out files show it learned nothing
    cfg = toy_config("malconv")
    train = gen_dataset(40, toy_template(), PlantSpec("slack", 0.5), seed=0)
    held = gen_dataset(100, toy_template(), PlantSpec("slack", 0.5), seed=100)
    res = train_toy(cfg, train, epochs=10, seed=0)
    assert 0.4 <= accuracy(cfg, res.weights, held) <= 0.6


@pytest.mark.slow
def test_slack_plant_trains(toy_slack_model):
    cfg = toy_config("malconv")
    res = toy_slack_model
    assert res.accuracy >= 0.95
    held = gen_dataset(50, toy_template(), PlantSpec("slack", 1.0), seed=100)
    assert accuracy(cfg, res.weights, held) >= 0.9
