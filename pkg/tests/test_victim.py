import hashlib
import struct
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dramlocker.dram import DramConfig, DramState, RowAddress as R
from dramlocker.errors import FormatError, PageFault, PlacementError, RangeError
from dramlocker.locker import Reservation
from dramlocker.victim import (Dataset, Layer, PageTable, QuantizedModel, decode_pte, encode_pte,
                               evaluate, load_model, map_weights_to_rows, parse_dataset,
                               parse_model, read_manifest, save_model, sync_model_from_dram,
                               translate, write_model_to_dram)


def toy(seed=0):
    rng = np.random.default_rng(seed)
    return QuantizedModel([Layer(rng.integers(-128, 128, (4, 3)), 0.5, "relu"),
                           Layer(rng.integers(-128, 128, (3, 2)), 0.25, "identity")])


def test_fixture_matches_manifest(fixture_model, test_set):
    man = read_manifest()
    blob = resources.files("dramlocker.data").joinpath("model.bin").read_bytes()
    assert hashlib.sha256(blob).hexdigest() == man["model_sha256"]
    assert [l.weights.shape for l in fixture_model.layers] == [(64, 32), (32, 16), (16, 10)]
    assert len(test_set) == int(man["n_test"])
    assert evaluate(fixture_model, test_set, None) == pytest.approx(float(man["clean_accuracy_test"]), abs=1e-6)
    assert evaluate(fixture_model, test_set, 128, 0) == pytest.approx(
        float(man["clean_accuracy_test_sample128_seed0"]), abs=1e-6)


@pytest.mark.parametrize("width", [1, 2])
def test_model_roundtrip(tmp_path, width):
    m = toy()
    save_model(m, tmp_path / "m.bin", weight_width=width)
    back = load_model(tmp_path / "m.bin")
    assert back.digest() == m.digest()
    assert [l.scale for l in back.layers] == [0.5, 0.25]
    assert [l.activation for l in back.layers] == ["relu", "identity"]


def test_model_format_errors(tmp_path):
    m = toy()
    save_model(m, tmp_path / "m.bin")
    blob = (tmp_path / "m.bin").read_bytes()
    with pytest.raises(FormatError):
        parse_model(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        parse_model(blob[:-1])
    with pytest.raises(FormatError):
        parse_model(blob + b"\0")
    with pytest.raises(FormatError):  # zero scale
        parse_model(blob[:20] + struct.pack("<d", 0.0) + blob[28:])
    save_model(m, tmp_path / "w.bin", weight_width=2)
    wide = bytearray((tmp_path / "w.bin").read_bytes())
    wide[-2:] = struct.pack("<h", 300)
    with pytest.raises(RangeError):
        parse_model(bytes(wide))
    with pytest.raises(RangeError):
        Layer(np.array([[200]]), 1.0)
    with pytest.raises(FormatError):
        QuantizedModel([Layer(np.zeros((2, 3)), 1.0), Layer(np.zeros((2, 3)), 1.0)])


def test_dataset_roundtrip(test_set):
    assert parse_dataset(test_set.to_bytes()).to_bytes() == test_set.to_bytes()
    with pytest.raises(FormatError):
        parse_dataset(b"\0" * 64)
    s1, s2 = test_set.sample(50, 3), test_set.sample(50, 3)
    assert np.array_equal(s1.labels, s2.labels)
    assert test_set.features.max() <= 1.0


def test_with_weight_bytes_inverse(fixture_model):
    assert fixture_model.with_weight_bytes(fixture_model.weight_bytes()).digest() == fixture_model.digest()


@given(st.integers(0, 1000), st.sampled_from(["scatter", "sequential"]))
def test_placement_properties(seed, policy):
    cfg = DramConfig.desk()
    model = load_model()
    res = Reservation(cfg)
    wmap = map_weights_to_rows(model, cfg, policy, seed, res)
    rows = set(wmap.rows)
    assert len(rows) == len(wmap.rows) == -(-2720 // cfg.row_size)
    assert not any(res.is_reserved(r) for r in rows)
    if policy == "scatter":
        assert not any(n in rows for r in rows for n in cfg.neighbors(r))


@given(st.integers(0, 2), st.data())
def test_locate_inverse(layer, data):
    cfg = DramConfig.desk()
    model = load_model()
    wmap = map_weights_to_rows(model, cfg, "scatter", 0, Reservation(cfg))
    idx = data.draw(st.integers(0, model.layer_sizes[layer] - 1))
    bit = data.draw(st.integers(0, 7))
    row, off = wmap.locate(layer, idx, bit)
    assert wmap.inverse(row, off) == (layer, idx, bit)


def test_dram_roundtrip_and_flip_effect(fixture_model):
    cfg = DramConfig.desk()
    dram = DramState(cfg)
    wmap = map_weights_to_rows(fixture_model, cfg, "scatter", 0, Reservation(cfg))
    write_model_to_dram(fixture_model, wmap, dram)
    assert sync_model_from_dram(fixture_model, wmap, dram).digest() == fixture_model.digest()
    row, off = wmap.locate(2, 5, 7)
    data = bytearray(dram.peek(row))
    data[off // 8] ^= 0x80
    dram.poke(row, 0, bytes(data))
    changed = sync_model_from_dram(fixture_model, wmap, dram)
    assert int(changed.layers[2].weights.reshape(-1)[5]) != int(fixture_model.layers[2].weights.reshape(-1)[5])


def test_placement_exhaustion():
    cfg = DramConfig(banks=1, subarrays_per_bank=1, rows_per_subarray=8, row_size=256)
    with pytest.raises(PlacementError):
        map_weights_to_rows(load_model(), cfg, "scatter", 0, Reservation(cfg))


def test_pte_encoding():
    assert encode_pte(5) == 0x8000_0005
    assert decode_pte(0x8000_0005) == (5, True)
    assert decode_pte(0x0000_0005) == (5, False)
    with pytest.raises(ValueError):
        encode_pte(1 << 22)


def test_page_table_translate():
    cfg = DramConfig.desk()
    dram = DramState(cfg)
    pt = PageTable(dram, [R(0, 0, 8)], 16)
    pt.map(3, R(0, 2, 1))
    assert translate(pt, 3 * 256 + 17) == R(0, 2, 1)
    row, off = pt.location(3)
    assert row == R(0, 0, 8) and off == 12
    assert struct.unpack_from("<I", dram.peek(row), 12)[0] == 0x8000_0000 | cfg.flat(R(0, 2, 1))
    with pytest.raises(PageFault):
        translate(pt, 4 * 256)  # unmapped
    with pytest.raises(PageFault):
        pt.location(16)
    dram.poke(row, 12, struct.pack("<I", 0x8000_0000 | 0x3FFFFF))
    with pytest.raises(PageFault):
        translate(pt, 3 * 256)
    pt.unmap(3)
    assert not pt.entry(3).valid
