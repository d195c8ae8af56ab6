"""End-to-end acceptance checks.

Each test prints one verdict line with the measured quantities, then asserts
the stated tolerance.  Run order follows the numbered names, cheapest first;
the trained-model fixtures come from conftest and are shared across tests.
"""

import time

import numpy as np
import pytest
import scipy.stats

from gradcheck import fd_gradient_check, leaf
from tabdens import (beta_at, build_schedule, calibration_sweep, encode_batch,
                     estimate_density, export_histogram, save_checkpoint,
                     sequential_joint_sample_batch, split_rows, train)
from tabdens.data import build_inference_sequence
from tabdens.datasets import make_pair_table
from tabdens.training import make_config


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. every differentiable op agrees with central finite differences


def test_01_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    offset_denom = leaf(rng, (5, 3))
    offset_denom.data = offset_denom.data + np.sign(offset_denom.data) * 1.5
    positive = leaf(rng, (6, 4))
    positive.data = np.abs(positive.data) + 0.5
    cases = [
        ("matmul", [leaf(rng, (4, 6)), leaf(rng, (6, 3))], {}),
        ("add", [leaf(rng, (4, 5)), leaf(rng, (5,))], {}),
        ("mul", [leaf(rng, (6, 2)), leaf(rng, (6, 2))], {}),
        ("sub", [leaf(rng, (3, 4)), leaf(rng, (3, 1))], {}),
        ("divide", [leaf(rng, (5, 3)), offset_denom], {}),
        ("activation", [leaf(rng, (8, 9))], {}),
        ("softmax-last-axis", [leaf(rng, (5, 11))], {}),
        ("layer-normalize-last-axis", [leaf(rng, (4, 12))], {}),
        ("sum", [leaf(rng, (7, 5))], {}),
        ("mean", [leaf(rng, (7, 5))], {}),
        ("square", [leaf(rng, (6, 4))], {}),
        ("sqrt", [positive], {}),
        ("concat", [leaf(rng, (3, 4)), leaf(rng, (3, 2)), leaf(rng, (3, 5))],
         {"axis": 1}),
        ("slice", [leaf(rng, (6, 8))],
         {"key": (slice(1, 5), slice(None, None, 2))}),
        # Moderate fill value keeps the finite-difference loss well
        # conditioned; the gradient is fill-value independent.
        ("masked-fill", [leaf(rng, (5, 7))],
         {"mask": rng.random((5, 7)) < 0.4, "value": -2.0}),
    ]
    start = time.perf_counter()
    worst = 0.0
    for kind, inputs, kwargs in cases:
        worst = max(worst, fd_gradient_check(kind, inputs, rng, n_coords=100,
                                             rel_tol=1e-4, **kwargs))
    elapsed = time.perf_counter() - start
    verdict("gradient oracle", elapsed < 60.0,
            f"{len(cases)} ops, worst relative error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. the noise schedule hits its defining constants


def test_02_noise_schedule_constants():
    schedule = build_schedule(120, 1e-5, 0.1)
    midpoint = float(beta_at(0.0, 1e-5, 0.1))
    # The 120-point grid straddles zero; its middle pair averages to the
    # midpoint by the ramp's symmetry.
    grid_mid = (schedule.betas[59] + schedule.betas[60]) / 2.0
    first_err = abs(schedule.betas[0] - 0.000257237589432)
    last_err = abs(schedule.betas[-1] - 0.099752762410568)
    ok = (midpoint == 0.050005
          and abs(grid_mid - 0.050005) < 1e-12
          and first_err < 1e-9
          and last_err < 1e-9)
    verdict("noise schedule constants", ok,
            f"midpoint {midpoint!r}, endpoint errors {first_err:.1e}/{last_err:.1e}")


# ---------------------------------------------------------------------------
# 3. a normal marginal survives the full train-and-sample round trip


def test_03_normal_marginal_round_trip(normal_model):
    start = time.perf_counter()
    est = estimate_density(normal_model.ckpt, [], "x", n_samples=10000,
                           rng=np.random.default_rng(101))
    elapsed = normal_model.train_seconds + (time.perf_counter() - start)
    mean = float(est.samples.mean())
    var = float(est.samples.var())
    ok = abs(mean) < 0.05 and 0.9 <= var <= 1.1 and elapsed < 600.0
    verdict("normal marginal", ok,
            f"mean {mean:+.4f}, variance {var:.4f}, {elapsed:.0f}s total")


# ---------------------------------------------------------------------------
# 4. two narrow modes stay two narrow modes


def test_04_bimodal_conditional_density(bimodal_model):
    results = []
    for flag in (-1.0, 1.0):
        est = estimate_density(bimodal_model.ckpt, [("flag", flag)], "target",
                               n_samples=4000, rng=np.random.default_rng(103))
        s = est.samples
        share_high = float(np.mean(s > 0))
        center_low = float(np.median(s[s < 0]))
        center_high = float(np.median(s[s > 0]))
        middle = float(np.mean(np.abs(s) < 1.0))
        results.append((share_high, center_low, center_high, middle))
    ok = all(0.4 <= sh <= 0.6
             and abs(cl + 2.0) <= 0.15
             and abs(ch - 2.0) <= 0.15
             and mid <= 0.05
             for sh, cl, ch, mid in results)
    detail = "; ".join(
        f"flag={f:+.0f}: split {sh:.3f}, centers {cl:+.3f}/{ch:+.3f}, middle {mid:.3f}"
        for f, (sh, cl, ch, mid) in zip((-1.0, 1.0), results))
    verdict("bimodal conditional", ok, detail)


# ---------------------------------------------------------------------------
# 5. housing marginals match the training distributions


def test_05_housing_marginals(housing_model):
    ckpt, table = housing_model.ckpt, housing_model.table
    train_idx, _ = split_rows(table.n_rows, float(ckpt.config["holdout_fraction"]),
                              int(ckpt.config["seed"]))
    rng = np.random.default_rng(105)
    stats = {}
    for name in table.names:
        est = estimate_density(ckpt, [], name, n_samples=4096, rng=rng)
        col = table.values[train_idx, table.names.index(name)]
        stats[name] = scipy.stats.ks_2samp(est.samples, col).statistic
    worst = max(stats.values())
    ok = worst < 0.08 and housing_model.train_seconds < 7200.0
    verdict("housing marginals", ok,
            f"worst KS {worst:.4f} ({max(stats, key=stats.get)}), "
            f"trained in {housing_model.train_seconds:.0f}s")


# ---------------------------------------------------------------------------
# 6. conditioning on income moves the predicted house value the right way


def test_06_house_value_rises_with_income(housing_model):
    rng = np.random.default_rng(106)
    incomes = [1.0, 2.0, 3.5, 5.0, 8.0]
    medians = []
    for inc in incomes:
        est = estimate_density(housing_model.ckpt, [("MedInc", inc)],
                               "MedHouseVal", n_samples=2048, rng=rng)
        medians.append(est.median)
    ok = all(a < b for a, b in zip(medians, medians[1:]))
    verdict("income trend", ok,
            "medians " + " -> ".join(f"{m:.3f}" for m in medians))


# ---------------------------------------------------------------------------
# 7. held-out truths land at uniform quantiles


def test_07_quantile_calibration(housing_model):
    ckpt, table = housing_model.ckpt, housing_model.table
    _, test_idx = split_rows(table.n_rows, float(ckpt.config["holdout_fraction"]),
                             int(ckpt.config["seed"]))
    report = calibration_sweep(ckpt, table.values[test_idx],
                               rng=np.random.default_rng(107),
                               trials=2000, n_samples=256)
    ok = report.ks_stat < 0.08
    verdict("quantile calibration", ok,
            f"KS {report.ks_stat:.4f}, central mass {report.central_mass:.3f}, "
            f"over-concentration flagged: {report.over_concentrated}")


# ---------------------------------------------------------------------------
# 8. chained one-dimensional draws recover a joint dependence


def test_08_joint_sampling_correlation(pair_model):
    draws = sequential_joint_sample_batch(pair_model.ckpt, ["x", "y"], [],
                                          rng=np.random.default_rng(108),
                                          n_draws=2000)
    r = float(np.corrcoef(draws[:, 0], draws[:, 1])[0, 1])
    verdict("joint correlation", r > 0.9, f"Pearson r {r:.4f} over 2000 draws")


# ---------------------------------------------------------------------------
# 9. order and padding cannot matter, even at double context length


def test_09_encoder_invariances_at_double_context(housing_model):
    ckpt = housing_model.ckpt
    registry, dims = ckpt.registry, ckpt.dims
    trained_L = int(ckpt.config["context_length"])
    double_L = 2 * trained_L
    row = housing_model.table.values[17]
    conditions = [(name, float(row[i])) for i, name in enumerate(registry.names)
                  if name != "MedHouseVal"]

    def encoding(conds, L):
        seq = build_inference_sequence(conds, "MedHouseVal", registry, L)
        return encode_batch(seq.token_ids[None], seq.magnitudes[None],
                            seq.mask[None], ckpt.params, dims).data

    base = encoding(conditions, double_L)
    perm_rng = np.random.default_rng(109)
    perm_ok = all(
        np.array_equal(base, encoding([conditions[j] for j in perm_rng.permutation(8)],
                                      double_L))
        for _ in range(6))

    # Scatter the conditions among padding slots; the mask must absorb it.
    seq = build_inference_sequence(conditions, "MedHouseVal", registry, double_L)
    scatter = np.full(double_L, registry.padding_id, dtype=np.int64)
    mags = np.zeros(double_L)
    positions = [0] + list(1 + 2 * np.arange(8))
    for src, dst in enumerate(positions):
        scatter[dst] = seq.token_ids[src]
        mags[dst] = seq.magnitudes[src]
    mask = scatter != registry.padding_id
    mask[0] = True
    scattered = encode_batch(scatter[None], mags[None], mask[None],
                             ckpt.params, dims).data
    pad_ok = np.array_equal(base, scattered)

    short = encoding(conditions, trained_L)
    length_ok = np.array_equal(base, short)

    est_short = estimate_density(ckpt, conditions, "MedHouseVal", n_samples=32,
                                 rng=np.random.default_rng(110))
    est_long = estimate_density(ckpt, conditions, "MedHouseVal", n_samples=32,
                                rng=np.random.default_rng(110),
                                context_length=double_L)
    sample_ok = np.array_equal(est_short.samples, est_long.samples)

    ok = perm_ok and pad_ok and length_ok and sample_ok
    verdict("encoder invariances", ok,
            f"permutations {perm_ok}, scattered padding {pad_ok}, "
            f"context {trained_L} vs {double_L} bit-identical {length_ok and sample_ok}")


# ---------------------------------------------------------------------------
# 10. identical seeds give identical artifacts


def test_10_byte_level_reproducibility(tmp_path):
    table = make_pair_table(n_rows=128, seed=3)
    results = []
    for tag in ("a", "b"):
        cfg = make_config(epochs=3, cycle_length=3, batch_size=64,
                          context_length=3, d_model=8, n_heads=2, n_layers=1,
                          n_steps=16, seed=23)
        ckpt = train(cfg, table=table)
        path = tmp_path / f"{tag}.ckpt"
        save_checkpoint(ckpt, path)
        est = estimate_density(ckpt, [("x", 0.2)], "y", n_samples=128,
                               rng=np.random.default_rng(42))
        results.append((path.read_bytes(), export_histogram(est, bins=12)))
    ck_ok = results[0][0] == results[1][0]
    export_ok = results[0][1] == results[1][1]
    verdict("reproducibility", ck_ok and export_ok,
            f"checkpoints byte-identical {ck_ok}, exports identical {export_ok}")
