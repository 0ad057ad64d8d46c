"""Evaluation metrics and the inference benchmark harness.

Count metrics (MAE, GAME) use real-valued density-map sums with no
rounding. Map-quality metrics (SSIM, PSNR) compare predicted and
ground-truth density maps directly; SSIM uses the conventional 11x11
Gaussian window (sigma 1.5) with C1=(0.01 L)^2, C2=(0.03 L)^2 where L is
the wider dynamic range of the two maps, and PSNR's MAX is the
ground-truth map's maximum (density maps are not 8-bit data).
"""

import csv
import json
import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

BENCH_WARMUP_ENV = "CROWDCOUNT_BENCH_WARMUP"
BENCH_RUNS_ENV = "CROWDCOUNT_BENCH_RUNS"


def mae(pairs):
    """Mean absolute count error over (estimated, true) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mae needs at least one pair")
    return float(np.mean([abs(e - g) for e, g in pairs]))


def _grid_cells(d, grid):
    h, w = d.shape
    ch = -(-h // grid)
    cw = -(-w // grid)
    if ch * grid != h or cw * grid != w:
        d = np.pad(d, ((0, ch * grid - h), (0, cw * grid - w)), mode="edge")
    return d.reshape(grid, ch, grid, cw).sum(axis=(1, 3))


def game(pred, gt, grid=4):
    """Grid average mean error for one image: sum over the grid x grid
    cells of the absolute cell-count differences."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    if pred.shape != gt.shape:
        raise ShapeError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.abs(_grid_cells(pred, grid) - _grid_cells(gt, grid)).sum())


def game_dataset(map_pairs, grid=4):
    vals = [game(p, g, grid) for p, g in map_pairs]
    if not vals:
        raise ValueError("game_dataset needs at least one pair")
    return float(np.mean(vals))


def _gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return g


def _window_filter(img, g1):
    """Valid-mode separable Gaussian filtering."""
    k = g1.size
    patches = sliding_window_view(img, (k, k))
    win = np.outer(g1, g1)
    return np.tensordot(patches, win, axes=([2, 3], [0, 1]))


def ssim(pred, gt, window=11, sigma=1.5):
    if pred.shape != gt.shape:
        raise ShapeError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    k = min(window, pred.shape[0], pred.shape[1])
    g1 = _gaussian_window(k, sigma)
    x = pred.astype(np.float64)
    y = gt.astype(np.float64)
    # the wider of the two ranges keeps ssim symmetric in its arguments
    drange = max(float(y.max() - y.min()), float(x.max() - x.min()))
    if drange == 0.0:
        drange = 1.0
    c1 = (0.01 * drange) ** 2
    c2 = (0.03 * drange) ** 2
    mu_x = _window_filter(x, g1)
    mu_y = _window_filter(y, g1)
    var_x = _window_filter(x * x, g1) - mu_x * mu_x
    var_y = _window_filter(y * y, g1) - mu_y * mu_y
    cov = _window_filter(x * y, g1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def psnr(pred, gt):
    """10*log10(MAX^2 / MSE), MAX = ground-truth map maximum; inf if equal."""
    if pred.shape != gt.shape:
        raise ShapeError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred.astype(np.float64) - gt.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    peak = float(gt.max())
    return 10.0 * math.log10(peak * peak / mse)


def benchmark(model, input_shape, warmup_runs=3, timed_runs=10, seed=0):
    """Wall-clock inference timing on one dedicated thread.

    Returns mean/std/min per-run milliseconds and throughput in frames
    per second computed from the same timed window. Environment
    variables CROWDCOUNT_BENCH_WARMUP / CROWDCOUNT_BENCH_RUNS override
    the run counts.
    """
    warmup_runs = int(os.environ.get(BENCH_WARMUP_ENV, warmup_runs))
    timed_runs = int(os.environ.get(BENCH_RUNS_ENV, timed_runs))
    if timed_runs < 1:
        raise ValueError("timed_runs must be >= 1")
    x = np.random.default_rng(seed).uniform(-1, 1, input_shape).astype(model.dtype)
    for _ in range(warmup_runs):
        model.forward(x)
    times = []
    for _ in range(timed_runs):
        t0 = time.perf_counter()
        model.forward(x)
        times.append(time.perf_counter() - t0)
    total = sum(times)
    frames = input_shape[0] * timed_runs
    return {
        "mean_ms": 1000.0 * total / timed_runs,
        "std_ms": 1000.0 * float(np.std(times)),
        "min_ms": 1000.0 * min(times),
        "fps": frames / total,
        "timed_runs": timed_runs,
        "warmup_runs": warmup_runs,
    }


def model_footprint(model, input_h=512, input_w=640):
    """(serialized size in bytes, GMACs at the reference input size)."""
    from .model import count_macs
    from .serialize import serialize_model

    size = len(serialize_model(model))
    macs = count_macs(model.config, input_h, input_w)
    return size, macs["total_macs"] / 1e9


@dataclass
class EvalReport:
    dataset_id: str
    model_id: str
    mae: float
    game: float
    game_grid: int
    ssim: float
    psnr: float  # may be +inf
    model_size_bytes: int
    gmacs: float
    inference_ms: float
    inference_ms_std: float
    throughput_fps: float

    def to_json(self):
        d = asdict(self)
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return json.dumps(d, indent=2)

    def append_csv(self, path):
        exists = os.path.exists(path)
        with open(path, "a", newline="") as f:
            writer = csv.writer(f)
            if not exists:
                writer.writerow(list(asdict(self)))
            writer.writerow(
                ["inf" if isinstance(v, float) and math.isinf(v) else v
                 for v in asdict(self).values()]
            )


def evaluate(model, eval_pairs, dataset_id="dataset", model_id="model",
             grid=4, bench_shape=None, warmup_runs=3, timed_runs=10):
    """Full eight-metric report over (predicted map, gt map, true count) triples."""
    triples = list(eval_pairs)
    if not triples:
        raise ValueError("evaluate needs at least one image")
    counts = [(float(p.sum()), float(n)) for p, _, n in triples]
    maps = [(p, g) for p, g, _ in triples]
    if bench_shape is None:
        h, w = triples[0][0].shape
        bench_shape = (1, model.config.in_channels, 4 * h, 4 * w)
    bench = benchmark(model, bench_shape, warmup_runs, timed_runs)
    size, gmacs = model_footprint(model, bench_shape[2], bench_shape[3])
    return EvalReport(
        dataset_id=dataset_id,
        model_id=model_id,
        mae=mae(counts),
        game=game_dataset(maps, grid),
        game_grid=grid,
        ssim=float(np.mean([ssim(p, g) for p, g in maps])),
        psnr=float(np.mean([psnr(p, g) for p, g in maps])),
        model_size_bytes=size,
        gmacs=gmacs,
        inference_ms=bench["mean_ms"],
        inference_ms_std=bench["std_ms"],
        throughput_fps=bench["fps"],
    )
