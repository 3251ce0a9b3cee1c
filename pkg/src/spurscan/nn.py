"""Byte-level CNN detectors (MalConv, BBDNN) with hand-written backprop.

Shapes follow PyTorch conventions so that converted checkpoints drop in:
conv weights are ``[out, in, kernel]``, fully-connected weights ``[out, in]``.
Activations are laid out ``[length, channels]``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFinite, ShapeMismatch, StaleCache, TokenOutOfRange

PAD_TOKEN = 256
ARCHS = ("malconv", "bbdnn")
OUTPUTS = ("softmax2", "sigmoid1")
TARGETS = ("score", "logit")


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    embed_dim: int
    window: int
    channels: tuple[int, ...]
    kernels: tuple[int, ...]
    strides: tuple[int, ...]
    pools: tuple[int, ...] = ()  # max-pool width (== stride) after each conv block
    output: str = "softmax2"
    vocab: int = 257

    def __post_init__(self):
        for name in ("channels", "kernels", "strides", "pools"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output {self.output!r}")
        if self.vocab != 257:
            raise ValueError("vocab must be 257 (256 byte values + padding token)")
        n = len(self.channels)
        if len(self.kernels) != n or len(self.strides) != n:
            raise ValueError("channels/kernels/strides must have equal length")
        if self.arch == "malconv":
            if n != 1 or self.pools:
                raise ValueError("malconv has exactly one gated conv and no intermediate pooling")
        elif len(self.pools) != n:
            raise ValueError("bbdnn needs one pool width per conv block")
        if min(self.kernels + self.strides + self.channels + (self.embed_dim, self.window)) < 1:
            raise ValueError("sizes must be positive")
        length = self.window
        for i in range(n):
            length = (length - self.kernels[i]) // self.strides[i] + 1
            if self.pools:
                length //= self.pools[i]
            if length < 1:
                raise ValueError(f"window {self.window} collapses to nothing at block {i}")

    @property
    def n_out(self) -> int:
        return 2 if self.output == "softmax2" else 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def malconv_config(**kw) -> ModelConfig:
    base = dict(arch="malconv", embed_dim=8, window=1_048_576, channels=(128,),
                kernels=(512,), strides=(512,), output="softmax2")
    base.update(kw)
    return ModelConfig(**base)


def bbdnn_config(**kw) -> ModelConfig:
    base = dict(arch="bbdnn", embed_dim=10, window=102_400, channels=(16, 32, 64, 96, 128),
                kernels=(8,) * 5, strides=(1,) * 5, pools=(4,) * 5, output="sigmoid1")
    base.update(kw)
    return ModelConfig(**base)


def default_config(arch: str) -> ModelConfig:
    return {"malconv": malconv_config, "bbdnn": bbdnn_config}[arch]()


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Ordered tensor names and shapes a WeightStore must carry for ``cfg``."""
    shapes = OrderedDict(embedding=(cfg.vocab, cfg.embed_dim))
    if cfg.arch == "malconv":
        c, k = cfg.channels[0], cfg.kernels[0]
        for gate in ("conv_a", "conv_b"):
            shapes[f"{gate}.weight"] = (c, cfg.embed_dim, k)
            shapes[f"{gate}.bias"] = (c,)
    else:
        c_in = cfg.embed_dim
        for i, (c, k) in enumerate(zip(cfg.channels, cfg.kernels)):
            shapes[f"conv{i}.weight"] = (c, c_in, k)
            shapes[f"conv{i}.bias"] = (c,)
            c_in = c
    shapes["fc.weight"] = (cfg.n_out, cfg.channels[-1])
    shapes["fc.bias"] = (cfg.n_out,)
    return shapes


@dataclass(frozen=True)
class WeightStore:
    """Named parameter tensors for one ModelConfig. Arrays are read-only."""

    cfg: ModelConfig
    tensors: Mapping[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if list(self.tensors) != list(expected):
            raise ShapeMismatch(f"tensor names {list(self.tensors)} != {list(expected)}")
        frozen = OrderedDict()
        for name, shape in expected.items():
            arr = np.array(self.tensors[name], copy=True)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"{name} holds non-finite values")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def astype(self, dtype) -> "WeightStore":
        return WeightStore(self.cfg, OrderedDict((k, v.astype(dtype)) for k, v in self.tensors.items()))

    def updated(self, grads: Mapping[str, np.ndarray], lr: float) -> "WeightStore":
        """New store with ``w - lr * g`` applied to every tensor present in ``grads``."""
        out = OrderedDict()
        for k, v in self.tensors.items():
            out[k] = (v - lr * grads[k]).astype(v.dtype) if k in grads else v
        return WeightStore(self.cfg, out)

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_weights(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> WeightStore:
    """Random init: N(0,1) embeddings, fan-in scaled normal conv/fc weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype)
        elif name == "embedding":
            tensors[name] = rng.standard_normal(shape).astype(dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return WeightStore(cfg, tensors)


def zero_weights(cfg: ModelConfig, dtype=np.float32) -> WeightStore:
    return WeightStore(cfg, OrderedDict((k, np.zeros(s, dtype)) for k, s in param_shapes(cfg).items()))


# ---------------------------------------------------------------------------
# tokens and embedding
# ---------------------------------------------------------------------------

def tokenize(data: bytes, window: int) -> np.ndarray:
    """Truncate to ``window`` bytes and right-pad with PAD_TOKEN."""
    raw = np.frombuffer(bytes(data[:window]), dtype=np.uint8)
    tokens = np.full(window, PAD_TOKEN, dtype=np.int64)
    tokens[:raw.size] = raw
    return tokens


def embed(tokens: np.ndarray, weights: WeightStore, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape != (cfg.window,):
        raise ShapeMismatch(f"token sequence shape {tokens.shape} != ({cfg.window},)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise TokenOutOfRange(f"tokens must lie in [0, {cfg.vocab - 1}]")
    return weights["embedding"][tokens]


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def _sigmoid(x):
    # tanh form cannot overflow on either tail
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """Valid 1-D convolution. x [L, Cin], w [Cout, Cin, k] -> y [Lout, Cout], windows."""
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=0)[::stride]  # [Lout, Cin, k]
    y = np.tensordot(win, w, axes=([1, 2], [1, 2])) + b
    return y, win


def conv1d_backward(dy, win, w, stride, in_len, need_params=True):
    cout, cin, k = w.shape
    l_out = dy.shape[0]
    dx = np.zeros((in_len, cin), dtype=dy.dtype)
    rows = np.flatnonzero(dy.any(axis=1))
    if 4 * rows.size < l_out:
        # after a global max-pool only a handful of output rows carry gradient
        dy_r = dy[rows]
        dwin = (dy_r @ w.reshape(cout, cin * k)).reshape(rows.size, cin, k)
        pos = rows[:, None] * stride + np.arange(k)
        np.add.at(dx, pos, dwin.transpose(0, 2, 1))
        if not need_params:
            return dx, None, None
        return dx, np.tensordot(dy_r, win[rows], axes=([0], [0])), dy.sum(axis=0)

    dwin = (dy @ w.reshape(cout, cin * k)).reshape(l_out, cin, k)
    if stride == k:
        dx[:l_out * k] = dwin.transpose(0, 2, 1).reshape(l_out * k, cin)
    else:
        span = stride * (l_out - 1) + 1
        for j in range(k):
            dx[j:j + span:stride] += dwin[:, :, j]
    if not need_params:
        return dx, None, None
    dw = np.tensordot(dy, win, axes=([0], [0]))
    return dx, dw, dy.sum(axis=0)


def maxpool1d(x: np.ndarray, width: int):
    """Non-overlapping max-pool along length; trailing remainder is dropped."""
    l_out = x.shape[0] // width
    blocks = x[:l_out * width].reshape(l_out, width, x.shape[1])
    idx = blocks.argmax(axis=1)  # [Lout, C], first max on ties
    y = np.take_along_axis(blocks, idx[:, None, :], axis=1)[:, 0, :]
    return y, idx


def maxpool1d_backward(dy, idx, width, in_len):
    l_out, c = dy.shape
    dblocks = np.zeros((l_out, width, c), dtype=dy.dtype)
    np.put_along_axis(dblocks, idx[:, None, :], dy[:, None, :], axis=1)
    dx = np.zeros((in_len, c), dtype=dy.dtype)
    dx[:l_out * width] = dblocks.reshape(l_out * width, c)
    return dx


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    cfg: ModelConfig
    weights: WeightStore
    emb: np.ndarray
    tokens: Optional[np.ndarray]
    layers: list = field(default_factory=list)
    pooled: Optional[np.ndarray] = None
    pool_idx: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None

    def pattern(self) -> tuple:
        """Discrete routing decisions (argmaxes, ReLU masks). Gradients are
        only smooth while this stays fixed."""
        parts = [self.pool_idx.tobytes()]
        for layer in self.layers:
            for key in ("relu_mask", "pool_idx"):
                if key in layer:
                    parts.append(layer[key].tobytes())
        return tuple(parts)


def _param(weights, name, dtype):
    return weights[name].astype(dtype, copy=False)


def forward(cfg: ModelConfig, weights: WeightStore, emb: np.ndarray,
            tokens: Optional[np.ndarray] = None):
    """Run the detector on an embedded window.

    Returns ``(score, cache)`` where score is the malware probability:
    softmax component 1 for two-way outputs, the sigmoid output otherwise.
    Computation happens in ``emb.dtype``.
    """
    if weights.cfg != cfg:
        raise ShapeMismatch("weights were built for a different ModelConfig")
    if emb.shape != (cfg.window, cfg.embed_dim):
        raise ShapeMismatch(f"embedding shape {emb.shape} != {(cfg.window, cfg.embed_dim)}")
    dt = emb.dtype
    cache = ForwardCache(cfg, weights, emb, tokens)
    x = emb
    if cfg.arch == "malconv":
        s = cfg.strides[0]
        a, win = conv1d(x, _param(weights, "conv_a.weight", dt), _param(weights, "conv_a.bias", dt), s)
        b, _ = conv1d(x, _param(weights, "conv_b.weight", dt), _param(weights, "conv_b.bias", dt), s)
        gate = _sigmoid(b)
        x = a * gate
        cache.layers.append(dict(win=win, a=a, gate=gate, in_len=cfg.window))
    else:
        for i, (s, p) in enumerate(zip(cfg.strides, cfg.pools)):
            pre, win = conv1d(x, _param(weights, f"conv{i}.weight", dt), _param(weights, f"conv{i}.bias", dt), s)
            mask = pre > 0
            act = pre * mask
            pooled, idx = maxpool1d(act, p)
            cache.layers.append(dict(win=win, relu_mask=mask, pool_idx=idx,
                                     in_len=x.shape[0], conv_len=pre.shape[0]))
            x = pooled
    cache.pool_idx = x.argmax(axis=0)
    cache.pooled = x[cache.pool_idx, np.arange(x.shape[1])]
    cache.logits = _param(weights, "fc.weight", dt) @ cache.pooled + _param(weights, "fc.bias", dt)
    if not np.all(np.isfinite(cache.logits)):
        raise NonFinite("forward pass produced non-finite logits")
    return malware_score(cfg, cache.logits), cache


def malware_score(cfg: ModelConfig, logits: np.ndarray) -> float:
    if cfg.output == "softmax2":
        z = logits - logits.max()
        e = np.exp(z)
        return float(e[1] / e.sum())
    return float(_sigmoid(logits[:1])[0])


def target_value(cfg: ModelConfig, logits: np.ndarray, target: str = "score") -> float:
    """Attribution target: malware probability or malware log-odds."""
    if target == "score":
        return malware_score(cfg, logits)
    if target == "logit":
        return float(logits[1] - logits[0]) if cfg.output == "softmax2" else float(logits[0])
    raise ValueError(f"unknown target {target!r}")


def target_logit_grad(cfg: ModelConfig, logits: np.ndarray, target: str = "score") -> np.ndarray:
    """d target / d logits."""
    dz = np.zeros_like(logits)
    if target == "logit":
        if cfg.output == "softmax2":
            dz[0], dz[1] = -1.0, 1.0
        else:
            dz[0] = 1.0
        return dz
    p = malware_score(cfg, logits)
    if cfg.output == "softmax2":
        dz[1], dz[0] = p * (1 - p), -p * (1 - p)
    else:
        dz[0] = p * (1 - p)
    return dz


def backward(cache: ForwardCache, weights: WeightStore, d_logits: np.ndarray,
             need_params: bool = True):
    """Backpropagate a logit gradient. Returns ``(d_emb, param_grads or None)``."""
    if cache.weights is not weights:
        raise StaleCache("cache was produced with a different WeightStore")
    cfg = cache.cfg
    dt = cache.emb.dtype
    grads = OrderedDict() if need_params else None
    d_logits = np.asarray(d_logits, dtype=dt)

    fc_w = _param(weights, "fc.weight", dt)
    d_pooled = fc_w.T @ d_logits
    if need_params:
        grads["fc.weight"] = np.outer(d_logits, cache.pooled)
        grads["fc.bias"] = d_logits.copy()

    last = cache.layers[-1]
    if cfg.arch == "malconv":
        l_top = last["a"].shape[0]
    else:
        l_top = last["conv_len"] // cfg.pools[-1]
    dx = np.zeros((l_top, d_pooled.size), dtype=dt)
    dx[cache.pool_idx, np.arange(d_pooled.size)] = d_pooled

    if cfg.arch == "malconv":
        a, gate, win = last["a"], last["gate"], last["win"]
        da = dx * gate
        db = dx * a * gate * (1 - gate)
        s = cfg.strides[0]
        d_emb, dwa, dba = conv1d_backward(da, win, _param(weights, "conv_a.weight", dt), s, cfg.window, need_params)
        d_emb_b, dwb, dbb = conv1d_backward(db, win, _param(weights, "conv_b.weight", dt), s, cfg.window, need_params)
        d_emb += d_emb_b
        if need_params:
            grads["conv_a.weight"], grads["conv_a.bias"] = dwa, dba
            grads["conv_b.weight"], grads["conv_b.bias"] = dwb, dbb
    else:
        for i in reversed(range(len(cache.layers))):
            layer = cache.layers[i]
            d_act = maxpool1d_backward(dx, layer["pool_idx"], cfg.pools[i], layer["conv_len"])
            d_pre = d_act * layer["relu_mask"]
            dx, dw, db = conv1d_backward(d_pre, layer["win"], _param(weights, f"conv{i}.weight", dt),
                                         cfg.strides[i], layer["in_len"], need_params)
            if need_params:
                grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = dw, db
        d_emb = dx

    if need_params:
        d_table = np.zeros((cfg.vocab, cfg.embed_dim), dtype=dt)
        if cache.tokens is not None:
            np.add.at(d_table, cache.tokens, d_emb)
        grads["embedding"] = d_table
        grads = OrderedDict((k, grads[k]) for k in param_shapes(cfg))
    return d_emb, grads


def backward_input(cfg: ModelConfig, weights: WeightStore, cache: ForwardCache,
                   d_score: float = 1.0, target: str = "score") -> np.ndarray:
    """Gradient of ``d_score * target`` with respect to the embedded input."""
    if cache.cfg != cfg:
        raise StaleCache("cache belongs to another config")
    dz = d_score * target_logit_grad(cfg, cache.logits, target)
    return backward(cache, weights, dz, need_params=False)[0]


def backward_params(cfg: ModelConfig, weights: WeightStore, cache: ForwardCache,
                    d_score: float = 1.0, target: str = "score"):
    """Gradient of ``d_score * target`` with respect to every parameter.

    The embedding-table gradient needs the token ids, so the cache must come
    from :func:`predict` (or a forward call given ``tokens``).
    """
    if cache.cfg != cfg:
        raise StaleCache("cache belongs to another config")
    if cache.tokens is None:
        raise StaleCache("parameter gradients need a cache that recorded token ids")
    dz = d_score * target_logit_grad(cfg, cache.logits, target)
    return backward(cache, weights, dz, need_params=True)[1]


def predict(cfg: ModelConfig, weights: WeightStore, data: bytes, dtype=None):
    """Tokenize, embed and run forward on raw file bytes."""
    tokens = tokenize(data, cfg.window)
    emb = embed(tokens, weights, cfg)
    if dtype is not None:
        emb = emb.astype(dtype)
    return forward(cfg, weights, emb, tokens)
