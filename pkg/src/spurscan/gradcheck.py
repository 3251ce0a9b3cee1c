"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import (
    ModelConfig,
    WeightStore,
    backward_input,
    backward_params,
    bbdnn_config,
    embed,
    forward,
    init_weights,
    malconv_config,
    target_value,
)

GRAD_FLOOR = 1e-6  # cells with |analytic| below this are degenerate and not checked


def small_config(arch: str) -> ModelConfig:
    """Randomised-test sized configs (window 256)."""
    if arch == "malconv":
        return malconv_config(embed_dim=4, window=256, channels=(16,), kernels=(8,), strides=(4,))
    return bbdnn_config(embed_dim=4, window=256, channels=(4, 6, 6, 8, 8), kernels=(3,) * 5,
                        strides=(1,) * 5, pools=(2,) * 5)


@dataclass
class GradcheckReport:
    arch: str
    max_rel_err_input: float
    max_rel_err_params: float
    n_input_cells: int
    n_param_cells: int
    n_kink_skips: int

    @property
    def max_rel_err(self) -> float:
        return max(self.max_rel_err_input, self.max_rel_err_params)


def _rel_err(a: float, n: float) -> float:
    denom = max(abs(a), abs(n))
    return 0.0 if denom == 0 else abs(a - n) / denom


def gradcheck(cfg: ModelConfig, seed: int = 0, weights: Optional[WeightStore] = None,
              n_cells: int = 200, n_params: int = 200, step: float = 1e-3,
              target: str = "score") -> GradcheckReport:
    """Compare analytic input and parameter gradients with central differences.

    Runs in float64. A sampled cell whose +/-step perturbation flips an argmax
    or a ReLU mask sits on a kink where the finite difference is meaningless;
    such cells are skipped and another one is drawn.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, seed, np.float64) if weights is None else weights.astype(np.float64)
    n_bytes = int(rng.integers(cfg.window // 2, cfg.window + 1))
    tokens = np.full(cfg.window, 256, dtype=np.int64)
    tokens[:n_bytes] = rng.integers(0, 256, n_bytes)

    emb = embed(tokens, weights, cfg)
    _, cache = forward(cfg, weights, emb, tokens)
    base_pattern = cache.pattern()
    g_in = backward_input(cfg, weights, cache, target=target)
    g_par = backward_params(cfg, weights, cache, target=target)
    kinks = 0

    def f(w, e):
        _, c = forward(cfg, w, e, tokens)
        return target_value(cfg, c.logits, target), c.pattern()

    errs_in = []
    cells = np.argwhere(np.abs(g_in) > GRAD_FLOOR)
    for i, d in cells[rng.permutation(len(cells))]:
        if len(errs_in) >= n_cells:
            break
        plus, minus = emb.copy(), emb.copy()
        plus[i, d] += step
        minus[i, d] -= step
        fp, pp = f(weights, plus)
        fm, pm = f(weights, minus)
        if pp != base_pattern or pm != base_pattern:
            kinks += 1
            continue
        errs_in.append(_rel_err(g_in[i, d], (fp - fm) / (2 * step)))

    flat = [(name, idx) for name, g in g_par.items()
            for idx in map(tuple, np.argwhere(np.abs(g) > GRAD_FLOOR))]
    errs_par = []
    for j in rng.permutation(len(flat)):
        if len(errs_par) >= n_params:
            break
        name, idx = flat[j]
        vals = []
        for sign in (1, -1):
            tensors = OrderedDict((k, v.copy()) for k, v in weights.tensors.items())
            tensors[name][idx] += sign * step
            w = WeightStore(cfg, tensors)
            vals.append(f(w, embed(tokens, w, cfg)))
        (fp, pp), (fm, pm) = vals
        if pp != base_pattern or pm != base_pattern:
            kinks += 1
            continue
        errs_par.append(_rel_err(g_par[name][idx], (fp - fm) / (2 * step)))

    return GradcheckReport(
        arch=cfg.arch,
        max_rel_err_input=float(max(errs_in, default=0.0)),
        max_rel_err_params=float(max(errs_par, default=0.0)),
        n_input_cells=len(errs_in),
        n_param_cells=len(errs_par),
        n_kink_skips=kinks,
    )
