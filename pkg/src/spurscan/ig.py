"""Integrated Gradients in embedding space against the all-padding baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import (
    PAD_TOKEN,
    ModelConfig,
    WeightStore,
    backward_input,
    embed,
    forward,
    target_value,
    tokenize,
)


@dataclass(frozen=True)
class IgConfig:
    steps: int = 50
    target: str = "score"  # "score" (malware probability) or "logit"
    baseline: str = "pad"  # window filled with token 256: the empty file

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.target not in ("score", "logit"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.baseline != "pad":
            raise ValueError("only the padding baseline is supported")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "target": self.target, "baseline": self.baseline}


@dataclass
class AttributionVector:
    values: np.ndarray  # one signed value per byte, length min(file_len, window)
    score_x: float  # target value at the input
    score_baseline: float  # target value at the baseline
    completeness_residual: float
    prediction: float = float("nan")  # malware probability of the input

    @property
    def gap(self) -> float:
        return self.score_x - self.score_baseline


def path_integral(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                  baseline: np.ndarray, steps: int) -> np.ndarray:
    """Right-endpoint Riemann sum of IG: (x - b) * mean_k grad(b + k/m (x - b)).

    Gradients are accumulated in float64 in a fixed order.
    """
    diff = x - baseline
    total = np.zeros(x.shape, dtype=np.float64)
    for k in range(1, steps + 1):
        total += grad_fn(baseline + (k / steps) * diff)
    return diff.astype(np.float64) * (total / steps)


def _embeddings(cfg, weights, data):
    tokens = tokenize(data, cfg.window)
    emb_x = embed(tokens, weights, cfg)
    emb_b = embed(np.full(cfg.window, PAD_TOKEN, dtype=np.int64), weights, cfg)
    return emb_x, emb_b


def attribution_matrix(cfg: ModelConfig, weights: WeightStore, igc: IgConfig,
                       data: bytes) -> np.ndarray:
    """IG attributions over the full window, shape ``[window, embed_dim]``."""
    emb_x, emb_b = _embeddings(cfg, weights, data)

    def grad(e):
        _, cache = forward(cfg, weights, e)
        return backward_input(cfg, weights, cache, target=igc.target)

    return path_integral(grad, emb_x, emb_b, igc.steps)


def integrated_gradients(cfg: ModelConfig, weights: WeightStore, igc: IgConfig,
                         data: bytes) -> AttributionVector:
    """Per-byte IG attributions of the malware target for one file.

    The attribution matrix is summed over the embedding dimension. Positions
    past the end of the file are pure padding, identical to the baseline, so
    their attribution is exactly zero; they are dropped from ``values``.
    """
    n = min(len(data), cfg.window)
    values = attribution_matrix(cfg, weights, igc, data).sum(axis=1)[:n]

    emb_x, emb_b = _embeddings(cfg, weights, data)
    pred, cache_x = forward(cfg, weights, emb_x)
    _, cache_b = forward(cfg, weights, emb_b)
    f_x = target_value(cfg, cache_x.logits, igc.target)
    f_b = target_value(cfg, cache_b.logits, igc.target)
    residual = abs(float(np.sum(values)) - (f_x - f_b))
    return AttributionVector(values, f_x, f_b, residual, pred)


def completeness_check(attr: AttributionVector, rel_tol: float) -> bool:
    return attr.completeness_residual <= rel_tol * max(abs(attr.gap), 1e-6)
