import json
import struct

import numpy as np
import pytest

from spurscan.errors import BadMagic, ManifestMismatch, TruncatedPayload
from spurscan.nn import bbdnn_config, init_weights, malconv_config, param_shapes
from spurscan.weights import MAGIC, load_weights, read_weights, save_weights, write_weights


def small(arch):
    if arch == "malconv":
        return malconv_config(embed_dim=8, window=4096, channels=(16,), kernels=(32,), strides=(16,))
    return bbdnn_config(embed_dim=10, window=4096, channels=(4,) * 5, kernels=(3,) * 5,
                        strides=(1,) * 5, pools=(2,) * 5)


def _split(blob):
    (n,) = struct.unpack_from("<I", blob, 8)
    return json.loads(blob[12:12 + n]), blob[12 + n:]


def _join(manifest, payload):
    head = json.dumps(manifest, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


@pytest.mark.parametrize("arch", ["malconv", "bbdnn"])
def test_round_trip_byte_identical(arch):
    w = init_weights(small(arch), seed=11)
    blob = save_weights(w)
    w2 = load_weights(blob)
    assert save_weights(w2) == blob
    for k in w.tensors:
        assert np.array_equal(w.tensors[k], w2.tensors[k])


def test_file_round_trip(tmp_path):
    w = init_weights(small("bbdnn"), seed=1)
    write_weights(w, tmp_path / "m.spurw")
    assert save_weights(read_weights(tmp_path / "m.spurw")) == save_weights(w)


def test_payload_is_little_endian_float32():
    w = init_weights(small("malconv"), seed=2)
    manifest, payload = _split(save_weights(w))
    first = manifest["tensors"][0]
    n = int(np.prod(first["shape"]))
    got = np.frombuffer(payload[first["offset"]:first["offset"] + 4 * n], "<f4")
    assert np.array_equal(got, w.tensors[first["name"]].ravel())


def test_bad_magic():
    blob = bytearray(save_weights(init_weights(small("malconv"))))
    blob[0] ^= 0xFF
    with pytest.raises(BadMagic):
        load_weights(bytes(blob))
    with pytest.raises(BadMagic):
        load_weights(b"")


def test_embedding_width_mismatch():
    blob = save_weights(init_weights(small("malconv")))
    manifest, payload = _split(blob)
    manifest["tensors"][0]["shape"] = [257, 9]
    with pytest.raises(ManifestMismatch):
        load_weights(_join(manifest, payload))


def test_missing_tensor():
    manifest, payload = _split(save_weights(init_weights(small("bbdnn"))))
    del manifest["tensors"][-1]
    with pytest.raises(ManifestMismatch):
        load_weights(_join(manifest, payload))


def test_garbled_manifest():
    blob = bytearray(save_weights(init_weights(small("bbdnn"))))
    blob[12] = ord("!")
    with pytest.raises(ManifestMismatch):
        load_weights(bytes(blob))


def test_arch_expectation():
    blob = save_weights(init_weights(small("bbdnn")))
    with pytest.raises(ManifestMismatch):
        load_weights(blob, expect_arch="malconv")
    assert load_weights(blob, expect_arch="bbdnn").cfg.arch == "bbdnn"


@pytest.mark.parametrize("cut", [1, 4, 1000])
def test_truncated_payload(cut):
    blob = save_weights(init_weights(small("malconv")))
    with pytest.raises(TruncatedPayload):
        load_weights(blob[:-cut])


def test_truncated_manifest():
    blob = save_weights(init_weights(small("malconv")))
    with pytest.raises(TruncatedPayload):
        load_weights(blob[:20])
    with pytest.raises(TruncatedPayload):
        load_weights(blob[:10])


def test_default_shapes():
    assert param_shapes(malconv_config())["conv_a.weight"] == (128, 8, 512)
    assert param_shapes(bbdnn_config())["fc.weight"] == (1, 128)
