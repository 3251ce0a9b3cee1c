import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spurscan.errors import ShapeMismatch, StaleCache, TokenOutOfRange
from spurscan.gradcheck import gradcheck, small_config
from spurscan.nn import (
    PAD_TOKEN,
    WeightStore,
    backward_input,
    backward_params,
    bbdnn_config,
    embed,
    forward,
    init_weights,
    malconv_config,
    param_shapes,
    predict,
    tokenize,
    zero_weights,
)


def naive_forward(cfg, w, emb):
    """Per-element loops; shares nothing with the vectorised engine."""
    def conv(x, weight, bias, stride):
        length, cin = len(x), len(x[0])
        cout, _, k = weight.shape
        out = []
        for start in range(0, length - k + 1, stride):
            row = []
            for o in range(cout):
                acc = float(bias[o])
                for c in range(cin):
                    for j in range(k):
                        acc += float(weight[o, c, j]) * x[start + j][c]
                row.append(acc)
            out.append(row)
        return out

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    x = emb.astype(np.float64).tolist()
    if cfg.arch == "malconv":
        a = conv(x, w["conv_a.weight"], w["conv_a.bias"], cfg.strides[0])
        b = conv(x, w["conv_b.weight"], w["conv_b.bias"], cfg.strides[0])
        x = [[ai * sig(bi) for ai, bi in zip(ra, rb)] for ra, rb in zip(a, b)]
    else:
        for i in range(len(cfg.channels)):
            y = conv(x, w[f"conv{i}.weight"], w[f"conv{i}.bias"], cfg.strides[i])
            y = [[max(v, 0.0) for v in row] for row in y]
            p = cfg.pools[i]
            x = [[max(y[r * p + q][c] for q in range(p)) for c in range(len(y[0]))]
                 for r in range(len(y) // p)]
    pooled = [max(row[c] for row in x) for c in range(len(x[0]))]
    fcw, fcb = w["fc.weight"], w["fc.bias"]
    z = [float(fcb[o]) + sum(float(fcw[o, c]) * pooled[c] for c in range(len(pooled)))
         for o in range(len(fcb))]
    if cfg.output == "softmax2":
        m = max(z)
        e = [math.exp(v - m) for v in z]
        return e[1] / sum(e)
    return sig(z[0])


def tiny(arch):
    if arch == "malconv":
        return malconv_config(embed_dim=3, window=64, channels=(5,), kernels=(4,), strides=(4,))
    return bbdnn_config(embed_dim=3, window=64, channels=(3, 4, 3, 4, 3), kernels=(2,) * 5,
                        strides=(1,) * 5, pools=(1, 2, 1, 2, 2))


def random_tokens(rng, window, n=None):
    n = window if n is None else n
    t = np.full(window, PAD_TOKEN)
    t[:n] = rng.integers(0, 256, n)
    return t


class TestEmbed:
    def test_all_pad(self):
        cfg = tiny("malconv")
        w = init_weights(cfg, 1)
        rows = embed(np.full(cfg.window, PAD_TOKEN), w, cfg)
        assert np.array_equal(rows, np.broadcast_to(w["embedding"][256], rows.shape))

    def test_truncation(self):
        cfg = tiny("malconv")
        data = bytes(range(200))
        t = tokenize(data, cfg.window)
        assert t.tolist() == list(range(64))

    def test_identity_table(self):
        cfg = tiny("malconv")
        w = init_weights(cfg, 0)
        tensors = OrderedDict(w.tensors)
        tensors["embedding"] = np.eye(257, 3, dtype=np.float32)
        w = WeightStore(cfg, tensors)
        t = np.full(cfg.window, PAD_TOKEN)
        t[:2] = [0, 1]
        rows = embed(t, w, cfg)
        assert rows[0].tolist() == [1, 0, 0] and rows[1].tolist() == [0, 1, 0]

    def test_token_out_of_range(self):
        cfg = tiny("malconv")
        t = np.full(cfg.window, 257)
        with pytest.raises(TokenOutOfRange):
            embed(t, init_weights(cfg), cfg)


class TestForward:
    @pytest.mark.parametrize("arch", ["malconv", "bbdnn"])
    def test_zero_weights_half(self, arch):
        cfg = tiny(arch)
        score, _ = predict(cfg, zero_weights(cfg), b"MZ" * 10)
        assert score == 0.5

    @pytest.mark.parametrize("arch", ["malconv", "bbdnn"])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive_oracle(self, arch, seed):
        cfg = tiny(arch)
        w = init_weights(cfg, seed, np.float64)
        rng = np.random.default_rng(seed)
        emb = embed(random_tokens(rng, cfg.window, 40), w, cfg)
        score, _ = forward(cfg, w, emb)
        assert score == pytest.approx(naive_forward(cfg, w, emb), abs=1e-6)

    def test_float32_close_to_oracle(self):
        cfg = tiny("malconv")
        w = init_weights(cfg, 3)
        emb = embed(random_tokens(np.random.default_rng(3), cfg.window), w, cfg)
        score, _ = forward(cfg, w, emb)
        assert score == pytest.approx(naive_forward(cfg, w, emb), abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["malconv", "bbdnn"]))
    def test_output_bounds(self, seed, arch):
        cfg = tiny(arch)
        w = init_weights(cfg, seed)
        score, cache = forward(cfg, w, embed(random_tokens(np.random.default_rng(seed), cfg.window), w, cfg))
        assert 0.0 < score < 1.0
        if arch == "malconv":
            z = cache.logits.astype(np.float64)
            p = np.exp(z - z.max())
            assert abs(p.sum() / p.sum() - 1) < 1e-6
            p /= p.sum()
            assert abs(p.sum() - 1.0) < 1e-6 and p[1] == pytest.approx(score, abs=1e-6)

    def test_shape_mismatch(self):
        cfg = tiny("bbdnn")
        with pytest.raises(ShapeMismatch):
            forward(cfg, init_weights(cfg), np.zeros((10, 3), np.float32))

    def test_deterministic(self):
        cfg = tiny("bbdnn")
        w = init_weights(cfg, 5)
        emb = embed(random_tokens(np.random.default_rng(5), cfg.window), w, cfg)
        s1, c1 = forward(cfg, w, emb)
        s2, c2 = forward(cfg, w, emb)
        assert s1 == s2
        assert np.array_equal(backward_input(cfg, w, c1), backward_input(cfg, w, c2))

    def test_default_configs(self):
        m, b = malconv_config(), bbdnn_config()
        assert (m.embed_dim, m.window, m.channels, m.kernels, m.strides, m.output) == \
            (8, 1_048_576, (128,), (512,), (512,), "softmax2")
        assert (b.embed_dim, b.window, len(b.channels), b.output) == (10, 102_400, 5, "sigmoid1")
        assert param_shapes(m)["embedding"] == (257, 8)

    def test_window_too_small(self):
        with pytest.raises(ValueError):
            bbdnn_config(window=256)


class TestBackward:
    @pytest.mark.parametrize("arch", ["malconv", "bbdnn"])
    def test_gradcheck(self, arch):
        rep = gradcheck(small_config(arch), seed=0)
        assert rep.n_input_cells >= 200 and rep.n_param_cells >= 200
        assert rep.max_rel_err <= 5e-3

    @pytest.mark.parametrize("arch", ["malconv", "bbdnn"])
    def test_zero_model_zero_input_grad(self, arch):
        cfg = tiny(arch)
        w = zero_weights(cfg)
        _, cache = predict(cfg, w, bytes(range(50)))
        assert not backward_input(cfg, w, cache).any()

    @pytest.mark.parametrize("arch", ["malconv", "bbdnn"])
    def test_zero_model_gradcheck_exact(self, arch):
        rep = gradcheck(small_config(arch), seed=0, weights=zero_weights(small_config(arch)), target="logit")
        assert rep.max_rel_err_input == 0.0 and rep.max_rel_err_params == 0.0

    def test_support_within_argmax_windows(self):
        cfg = small_config("malconv")
        w = init_weights(cfg, 2)
        _, cache = predict(cfg, w, bytes(np.random.default_rng(2).integers(0, 256, 100, dtype=np.uint8)))
        g = backward_input(cfg, w, cache)
        reach = np.zeros(cfg.window, bool)
        for pos in cache.pool_idx:
            reach[pos * cfg.strides[0]: pos * cfg.strides[0] + cfg.kernels[0]] = True
        assert not g[~reach].any()

    def test_all_pad_zero_row(self):
        cfg = tiny("bbdnn")
        w = init_weights(cfg, 4)
        tensors = OrderedDict(w.tensors)
        emb = tensors["embedding"].copy()
        emb[256] = 0
        tensors["embedding"] = emb
        tensors["conv0.bias"] = np.full(3, 0.5, np.float32)
        w = WeightStore(cfg, tensors)
        _, cache = predict(cfg, w, b"")
        g = backward_params(cfg, w, cache)
        assert not g["conv0.weight"].any()
        assert g["conv0.bias"].any()

    def test_stale_cache(self):
        cfg = tiny("malconv")
        w1, w2 = init_weights(cfg, 1), init_weights(cfg, 2)
        _, cache = predict(cfg, w1, b"abc")
        with pytest.raises(StaleCache):
            backward_input(cfg, w2, cache)

    def test_params_need_tokens(self):
        cfg = tiny("malconv")
        w = init_weights(cfg, 1)
        _, cache = forward(cfg, w, embed(np.full(cfg.window, PAD_TOKEN), w, cfg))
        with pytest.raises(StaleCache):
            backward_params(cfg, w, cache)

    def test_params_deterministic(self):
        cfg = tiny("malconv")
        w = init_weights(cfg, 1)
        g1 = backward_params(cfg, w, predict(cfg, w, b"hello world")[1])
        g2 = backward_params(cfg, w, predict(cfg, w, b"hello world")[1])
        for k in g1:
            assert g1[k].tobytes() == g2[k].tobytes()
