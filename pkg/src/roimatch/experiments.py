"""Small reproducible experiments: overfitting, ablations and compute measurement."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .data import Sample, synth_dataset, synth_pair
from .loss import LossConfig
from .metrics import MetricReport
from .model import ModelConfig, RoIMatcher
from .trainer import TrainConfig, build_model, train, validate

OVERFIT_LEVELS = ("I", "II", "III", "I", "II", "III", "I", "II")
# desk-scale network: 256 px input with 8 px tokens keeps thin kernels resolvable
TOY_CONFIG = ModelConfig(base_channels=32, encoder_depth="small", input_size=(256, 256), token_stride=8)


def overfit_samples(size: int = 256) -> list[Sample]:
    """Eight fixed pairs with mixed levels."""
    return [synth_pair(lv, seed, size) for seed, lv in enumerate(OVERFIT_LEVELS)]


def moving_average(values: Sequence[float], window: int = 100) -> np.ndarray:
    """``out[t]`` is the mean of ``values[t - window + 1 : t + 1]`` (defined for t >= window - 1)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


def loss_trend_violations(losses: Sequence[float], window: int = 100, start: int = 100,
                          tolerance: float = 0.05) -> list[tuple[int, float, float]]:
    """Windows [s, s + window] with s >= start where the moving average rises by more than ``tolerance``.

    Returns (s, ma[s], ma[s + window]) for each offending window start.
    """
    ma = moving_average(losses, window)            # ma[i] averages up to iteration i + window - 1
    out = []
    for s in range(max(start, window - 1), len(losses) - window):
        a, b = ma[s - window + 1], ma[s + 1]
        if b > a * (1 + tolerance):
            out.append((s, float(a), float(b)))
    return out


@dataclass
class RunResult:
    report: MetricReport
    log: list[dict] = field(default_factory=list)
    model: RoIMatcher | None = None


def overfit(model_config: ModelConfig | None = None, iterations: int = 500, learning_rate: float = 1e-3,
            seed: int = 0, samples: Sequence[Sample] | None = None) -> RunResult:
    """Train on a handful of pairs without augmentation and evaluate on the same pairs."""
    model_config = model_config or TOY_CONFIG
    samples = list(samples) if samples is not None else overfit_samples()
    model = build_model(model_config, seed)
    cfg = TrainConfig(learning_rate=learning_rate, max_iterations=iterations, augment=False, seed=seed,
                      milestones=(int(0.8 * iterations),))
    res = train(model, samples, LossConfig(), cfg)
    return RunResult(validate(model, samples), res.log, model)


@dataclass
class AblationSetup:
    train_per_level: int = 40
    test_per_level: int = 20
    size: int = 256
    iterations: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 4
    data_seed: int = 7


def ablation_data(setup: AblationSetup) -> tuple[list[Sample], list[Sample]]:
    """Disjoint synthetic train and held-out test pairs (different generator seeds)."""
    train_set = synth_dataset(setup.train_per_level, seed=setup.data_seed, size=setup.size)
    test_set = synth_dataset(setup.test_per_level, seed=setup.data_seed + 1, size=setup.size)
    return train_set, test_set


def train_and_test(model_config: ModelConfig, loss_config: LossConfig, train_set, test_set,
                   setup: AblationSetup, seed: int) -> MetricReport:
    """One ablation arm: identical data, budget and seed; only the configs differ."""
    model = build_model(model_config, seed)
    cfg = TrainConfig(learning_rate=setup.learning_rate, max_iterations=setup.iterations,
                      batch_size=setup.batch_size, augment=False, seed=seed,
                      milestones=(int(0.8 * setup.iterations),))
    train(model, train_set, loss_config, cfg)
    return validate(model, test_set)


def forward_flops(config: ModelConfig, batch: int = 1) -> int:
    """FLOPs of one forward pass, counted on the meta device (no memory is allocated)."""
    from torch.utils.flop_counter import FlopCounterMode
    h, w = config.input_size
    with torch.device("meta"):
        model = RoIMatcher(config).eval()
        ref = torch.empty(batch, 3, h, w)
        mask = torch.empty(batch, h, w)
        tgt = torch.empty(batch, 3, h, w)
    counter = FlopCounterMode(display=False)
    with counter, torch.no_grad():
        model(ref, mask, tgt)
    return int(counter.get_total_flops())


def grid_sampling_saving(size: int = 640, base: ModelConfig | None = None) -> tuple[int, int, float]:
    """(flops with grid sampling, flops without, relative reduction)."""
    base = base or ModelConfig()
    on = forward_flops(replace(base, input_size=(size, size), use_grid_sampling=True))
    off = forward_flops(replace(base, input_size=(size, size), use_grid_sampling=False))
    return on, off, 1 - on / off
