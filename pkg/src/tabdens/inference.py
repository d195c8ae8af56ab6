"""Density estimation, calibration, joint sampling, and table exports.

A density estimate is just a bag of reverse-chain samples for one request
under fixed conditions, destandardized back to raw units, with the median and
the robust standard deviation (1.4826 times the median absolute deviation)
attached.  Calibration repeats training-style draws on held-out rows and
checks that true values land at uniform quantiles of the predicted
distributions.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diffusion as dfn
from . import model as mdl
from .autodiff import Tensor
from .data import build_inference_sequence, sample_training_batch
from .errors import ConfigError, DataError
from .training import Checkpoint

MAD_TO_STD = 1.4826


@dataclass
class DensityEstimate:
    feature: str
    conditions: list[tuple[str, float]]
    samples: np.ndarray
    median: float
    robust_std: float


@dataclass
class CalibrationReport:
    trials: int
    quantiles: np.ndarray
    bin_edges: np.ndarray
    histogram: np.ndarray
    ks_stat: float
    central_mass: float
    over_concentrated: bool


def _summaries(samples: np.ndarray) -> tuple[float, float]:
    med = float(np.median(samples))
    return med, float(MAD_TO_STD * np.median(np.abs(samples - med)))


def _inference_length(ckpt: Checkpoint, n_conditions: int) -> int:
    trained = int(ckpt.config.get("context_length", 1 + n_conditions))
    return max(trained, 1 + n_conditions)


def estimate_density(ckpt: Checkpoint, conditions, request, n_samples: int = 1024,
                     rng: np.random.Generator | None = None,
                     context_length: int | None = None) -> DensityEstimate:
    """Sample the conditional density of one feature.

    The inference sequence is encoded once; all reverse chains share that
    condition vector.  ``conditions`` is an ordered list of (feature, raw
    value) pairs and may be empty for the unconditional marginal.
    """
    if n_samples < 1:
        raise ConfigError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng()
    registry, dims = ckpt.registry, ckpt.dims
    if context_length is None:
        context_length = _inference_length(ckpt, len(conditions))
    seq = build_inference_sequence(conditions, request, registry, context_length)
    params = mdl.detach_params(ckpt.params)
    cond = mdl.encode(seq, params, dims)
    std_samples = dfn.p_sample_chain(cond, ckpt.schedule, params, dims, rng,
                                     n_chains=n_samples)
    request_id = int(seq.token_ids[0])
    samples = registry.destandardize(request_id, std_samples)
    med, rstd = _summaries(samples)
    named = [(registry.name_of(f) if not isinstance(f, str) else f, float(v))
             for f, v in conditions]
    return DensityEstimate(registry.name_of(request_id), named, samples, med, rstd)


def quantile_of_truth(estimate: DensityEstimate, truth: float) -> float:
    """Mid-rank quantile of the true value within the sample bag."""
    s = estimate.samples
    below = np.count_nonzero(s < truth)
    equal = np.count_nonzero(s == truth)
    return (below + 0.5 * equal) / s.size


def ks_uniform(quantiles: np.ndarray) -> float:
    """One-sample Kolmogorov-Smirnov statistic against U(0, 1)."""
    q = np.sort(np.asarray(quantiles, dtype=np.float64))
    n = q.size
    grid = np.arange(1, n + 1) / n
    return float(max((grid - q).max(), (q - (grid - 1 / n)).max()))


def calibration_sweep(ckpt: Checkpoint, test_values: np.ndarray,
                      rng: np.random.Generator | None = None, trials: int = 2000,
                      n_samples: int = 256, bins: int = 20,
                      threads: int = 1) -> CalibrationReport:
    """Probability-integral-transform check on held-out rows.

    Each trial draws a random row, a random observed target, and a random
    conditioning subset of the row's other observed values, estimates the
    conditional density with ``n_samples`` chains, and records the quantile
    at which the true value falls.  The target's own value is kept out of
    the subset; otherwise pass-through trials would pile quantiles around
    0.5 and say nothing about predictive calibration.  Central
    over-concentration (truths near the 0.5 quantile) is flagged in the
    report, not treated as a failure.
    """
    if trials < 1:
        raise ConfigError("need at least one trial")
    rng = rng if rng is not None else np.random.default_rng()
    registry, dims = ckpt.registry, ckpt.dims
    L = int(ckpt.config.get("context_length", registry.size + 1))

    values = np.asarray(test_values, dtype=np.float64)
    usable = np.flatnonzero((~np.isnan(values)).any(axis=1))
    if usable.size == 0:
        raise DataError("no usable held-out rows")
    std_all = registry.standardize_matrix(values)

    rows = usable[rng.integers(0, usable.size, size=trials)]
    batch = sample_training_batch(std_all[rows], ~np.isnan(values[rows]),
                                  registry.padding_id, rng, L,
                                  exclude_target=True)

    chunk = 128
    starts = list(range(0, trials, chunk))
    chain_rngs = rng.spawn(len(starts))
    params = mdl.detach_params(ckpt.params)

    def run_chunk(idx: int) -> np.ndarray:
        lo = starts[idx]
        hi = min(lo + chunk, trials)
        cond = mdl.encode_batch(batch["token_ids"][lo:hi], batch["magnitudes"][lo:hi],
                                batch["mask"][lo:hi], params, dims)
        m = hi - lo
        wide = np.repeat(cond.data, n_samples, axis=0)
        draws = dfn.p_sample_chain(Tensor(wide), ckpt.schedule, params, dims,
                                   chain_rngs[idx], n_chains=m * n_samples)
        draws = draws.reshape(m, n_samples)
        truth = batch["target_values"][lo:hi, None]
        below = (draws < truth).sum(axis=1)
        equal = (draws == truth).sum(axis=1)
        return (below + 0.5 * equal) / n_samples

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_chunk, range(len(starts))))
    else:
        parts = [run_chunk(i) for i in range(len(starts))]
    quantiles = np.concatenate(parts)

    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(quantiles, bins=edges)
    hist = counts / trials
    central = float(np.mean(np.abs(quantiles - 0.5) < 0.1))
    # Flag threshold: three binomial standard errors above the uniform mass.
    expected = 0.2
    flagged = central > expected + 3.0 * np.sqrt(expected * (1 - expected) / trials)
    return CalibrationReport(trials, quantiles, edges, hist,
                             ks_uniform(quantiles), central, flagged)


def format_calibration_report(report: CalibrationReport) -> str:
    lines = [
        f"trials\t{report.trials}",
        f"ks_stat\t{report.ks_stat!r}",
        f"central_mass\t{report.central_mass!r}",
        f"over_concentrated\t{str(report.over_concentrated).lower()}",
        "",
        "left\tright\tmass",
    ]
    for i in range(report.histogram.size):
        lines.append(f"{float(report.bin_edges[i])!r}\t"
                     f"{float(report.bin_edges[i + 1])!r}\t"
                     f"{float(report.histogram[i])!r}")
    return "\n".join(lines) + "\n"


def sequential_joint_sample_batch(ckpt: Checkpoint, requests, base_conditions,
                                  rng: np.random.Generator | None = None,
                                  n_draws: int = 1) -> np.ndarray:
    """Chain-rule joint sampling, vectorized over independent draws.

    For each requested feature in order, one value is drawn per joint sample,
    conditioned on the base conditions plus that sample's earlier draws.
    Returns raw values, shape (n_draws, len(requests)).
    """
    if not requests:
        raise DataError("requests must be non-empty")
    registry, dims = ckpt.registry, ckpt.dims
    req_ids = [registry.id_of(r) if isinstance(r, str) else int(r) for r in requests]
    if len(set(req_ids)) != len(req_ids):
        raise DataError("requested features must be distinct")
    if n_draws < 1:
        raise ConfigError("need at least one draw")
    rng = rng if rng is not None else np.random.default_rng()
    params = mdl.detach_params(ckpt.params)

    base = [(registry.id_of(f) if isinstance(f, str) else int(f), float(v))
            for f, v in base_conditions]
    base_std = [(f, registry.standardize(f, v)) for f, v in base]

    out = np.empty((n_draws, len(req_ids)))
    drawn_std: list[np.ndarray] = []
    for k, rid in enumerate(req_ids):
        n_cond = len(base_std) + k
        L = max(_inference_length(ckpt, n_cond), 1 + n_cond)
        token_ids = np.full((n_draws, L), registry.padding_id, dtype=np.int64)
        magnitudes = np.zeros((n_draws, L))
        token_ids[:, 0] = rid
        for j, (f, v) in enumerate(base_std, start=1):
            token_ids[:, j] = f
            magnitudes[:, j] = v
        for j, prev in enumerate(drawn_std, start=1 + len(base_std)):
            token_ids[:, j] = req_ids[j - 1 - len(base_std)]
            magnitudes[:, j] = prev
        mask = token_ids != registry.padding_id
        mask[:, 0] = True
        cond = mdl.encode_batch(token_ids, magnitudes, mask, params, dims)
        std = dfn.p_sample_chain(cond, ckpt.schedule, params, dims, rng,
                                 n_chains=n_draws)
        drawn_std.append(std)
        out[:, k] = registry.destandardize(rid, std)
    return out


def sequential_joint_sample(ckpt: Checkpoint, requests, base_conditions,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """One joint sample: a single raw value per requested feature."""
    return sequential_joint_sample_batch(ckpt, requests, base_conditions, rng,
                                         n_draws=1)[0]


def export_histogram(samples, bins: int, value_range=None, path=None) -> str:
    """Normalized histogram as tab-separated text (left, right, density).

    Densities integrate to exactly one over the covered range.  ``samples``
    may be a DensityEstimate or a plain array.  When a range is given,
    samples outside it are dropped before normalizing.
    """
    if isinstance(samples, DensityEstimate):
        samples = samples.samples
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise DataError("no samples to export")
    if bins < 1:
        raise DataError("need at least one bin")
    if value_range is None:
        lo, hi = float(samples.min()), float(samples.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = float(value_range[0]), float(value_range[1])
        if not hi > lo:
            raise DataError(f"degenerate range ({lo}, {hi})")
    counts, edges = np.histogram(samples, bins=bins, range=(lo, hi))
    inside = counts.sum()
    if inside == 0:
        raise DataError("no samples fall inside the range")
    width = (hi - lo) / bins
    density = counts / (inside * width)
    lines = ["left\tright\tdensity"]
    for i in range(bins):
        lines.append(f"{float(edges[i])!r}\t{float(edges[i + 1])!r}\t"
                     f"{float(density[i])!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_histogram(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse an export_histogram file back into (left, right, density)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "left\tright\tdensity":
            raise DataError(f"{path}: unexpected header {header!r}")
        for line in fh:
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}: malformed row {line!r}")
            rows.append([float(p) for p in parts])
    arr = np.asarray(rows)
    return arr[:, 0], arr[:, 1], arr[:, 2]
