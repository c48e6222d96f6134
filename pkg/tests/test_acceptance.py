"""Acceptance gate: one test per release criterion, each printing PASS/FAIL.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Budgets are wall-clock upper bounds on a desktop CPU.
"""

import os
import time
from fractions import Fraction

import numpy as np
import pytest

from semlink import channel as ch
from semlink import cli, codec
from semlink import embedding_io as eio
from semlink import experiment as ex
from semlink import knowledge_base as kbm
from semlink.streams import make_rng


def _passed(name: str, started: float, budget_s: float) -> None:
    elapsed = time.perf_counter() - started
    assert elapsed < budget_s, f"{name}: {elapsed:.1f}s exceeded the {budget_s:.0f}s budget"
    print(f"ACCEPTANCE {name}: PASS ({elapsed:.1f}s)")


@pytest.fixture(scope="module")
def big_kb():
    ds = eio.generate_synthetic(100, 50, 512, 0.2, seed=1234)
    return kbm.build_kb(ds)


def test_cbr_arithmetic():
    started = time.perf_counter()
    grid = {128: Fraction(1, 48), 256: Fraction(1, 24), 512: Fraction(1, 12),
            1024: Fraction(1, 6), 2048: Fraction(1, 3)}
    for k, expected in grid.items():
        value = ch.cbr(k, 32, 32, 3)
        assert value == expected
        assert (value.numerator, value.denominator) == (expected.numerator, expected.denominator)
    _passed("cbr-arithmetic", started, 1.0)


def test_retrieval_oracle(big_kb):
    started = time.perf_counter()
    kb = big_kb
    assert kb.size == 5000 and kb.dim == 512
    rng = make_rng(2024, 0)
    queries = rng.standard_normal((1000, 512))
    ids, labels, dists = kbm.search_batch(kb, queries, 10)
    for q in range(1000):
        brute = kbm.brute_force_search(kb, queries[q], 10)
        assert ids[q].tolist() == [m.image_id for m in brute]
        # bit-identical distances, not approximately equal
        assert dists[q].tolist() == [m.distance for m in brute]
    _passed("retrieval-oracle", started, 30.0)


def test_channel_calibration():
    started = time.perf_counter()
    n = 1_000_000
    carrier = ch.ComplexSignal(np.ones(n, dtype=np.complex128))
    for snr_db in (-7.0, 0.0, 10.0):
        out, _ = ch.transmit(carrier, ch.ChannelConfig("awgn", snr_db, seed=7), stream_id=1)
        noise = out.symbols - carrier.symbols
        measured = float(np.mean(noise.real**2 + noise.imag**2))
        expected = 10.0 ** (-snr_db / 10.0)
        assert abs(measured - expected) / expected < 0.01
    gains, _ = ch.sample_gains_and_noise(ch.ChannelKind.RAYLEIGH, 0.0, (n,), make_rng(13, 0))
    second_moment = float(np.mean(gains.real**2 + gains.imag**2))
    assert abs(second_moment - 1.0) < 0.01
    _passed("channel-calibration", started, 10.0)


def test_gradient_check():
    started = time.perf_counter()
    params = codec.init_params(128, seed=7)
    y = make_rng(123, 0).standard_normal((4, 512))
    noiseless = codec.gradient_check(params, y, None, samples_per_tensor=48, seed=3)
    assert set(noiseless) == set(codec.TRAINABLE_FIELDS)
    assert max(noiseless.values()) < 1e-4, noiseless
    realization = ch.sample_gains_and_noise(
        ch.ChannelKind.RAYLEIGH, ch.snr_to_noise_variance(0.0), (4, 64), make_rng(5, 1)
    )
    frozen = codec.gradient_check(params, y, realization, samples_per_tensor=48, seed=3)
    assert max(frozen.values()) < 1e-4, frozen
    _passed("gradient-check", started, 60.0)


def test_synthetic_end_to_end():
    started = time.perf_counter()
    ds = eio.generate_synthetic(20, 50, 512, 0.05, seed=42)
    train_set, holdout = eio.split_train_val(ds, eio.SplitSpec(seed=1, train_fraction=0.8))
    transmit, kb_half = eio.split_transmit_kb(holdout, seed=2)
    kb = kbm.build_kb(kb_half)

    cfg = codec.TrainConfig(
        k=128, snr_grid_db=[-7.0, -4.0, 0.0, 4.0, 7.0], channel_kind="awgn",
        batch_size=64, epochs=30, learning_rate=5e-4, seed=3,
    )
    params, report = codec.train(train_set, transmit, kb, cfg)
    assert report.selected_epoch == int(np.argmax(report.val_accuracy))

    snr_grid = [-7, -6, -5, -4, -2, 0, 2, 4, 5, 6, 7, 10]
    accuracies = []
    for snr in snr_grid:
        eval_cfg = ex.EvalConfig(ch.ChannelConfig("awgn", float(snr), 99), trials_per_item=20)
        accuracies.append(ex.semantic_accuracy(params, transmit, kb, eval_cfg))

    assert accuracies[-1] >= 0.90, f"accuracy at 10 dB is {accuracies[-1]:.4f}"
    for lo, hi in zip(accuracies, accuracies[1:]):
        assert hi >= lo - 0.01, f"monotonicity violated beyond 1 point: {accuracies}"
    chance_cfg = ex.EvalConfig(ch.ChannelConfig("awgn", -40.0, 99), trials_per_item=20)
    chance = ex.semantic_accuracy(params, transmit, kb, chance_cfg)
    assert abs(chance - 0.05) <= 0.03, f"-40 dB accuracy {chance:.4f} not at the 5% chance level"
    _passed("synthetic-end-to-end", started, 600.0)


def test_sweep_determinism(tmp_path):
    started = time.perf_counter()
    data = tmp_path / "data.semb"
    assert cli.main(["gen-synthetic", "--classes", "20", "--per-class", "10",
                     "--seed", "5", "--output", str(data)]) == 0
    models = []
    for k in (16, 128):
        path = tmp_path / f"m{k}.scdc"
        codec.save_params(codec.init_params(k, seed=k), path)
        models += ["--model", str(path)]

    def sweep(threads, out):
        argv = ["sweep", *models, "--transmit", str(data), "--kb", str(data),
                "--snr-list=-4,0,inf", "--channels", "awgn,rayleigh",
                "--trials", "2", "--seed", "7", "--threads", str(threads),
                "--output", str(out)]
        assert cli.main(argv) == 0
        return out.read_bytes()

    serial = sweep(1, tmp_path / "serial.csv")
    threaded = sweep(8, tmp_path / "threaded.csv")
    repeat = sweep(1, tmp_path / "repeat.csv")
    assert serial == threaded == repeat
    assert serial.decode().startswith(ex.CSV_HEADER)
    _passed("sweep-determinism", started, 300.0)


def test_latency_harness(big_kb):
    started = time.perf_counter()
    report = ex.bench_latency(codec.init_params(128, seed=0), big_kb, n_queries=200, seed=9)
    assert report.kb_size == 5000
    for value in (report.net_median_ms, report.net_p95_ms, report.kb_median_ms, report.kb_p95_ms):
        assert np.isfinite(value) and value > 0
    print(
        f"latency on M=5000: net median {report.net_median_ms:.3f} ms, "
        f"kb median {report.kb_median_ms:.3f} ms "
        f"(reference points 1.0 ms / 1.2 ms, hardware-dependent, non-binding)"
    )
    _passed("latency-harness", started, 60.0)


@pytest.mark.skipif(
    "SEMLINK_REAL_SWEEP_CSV" not in os.environ,
    reason="real-embedding sweep CSV not provided (set SEMLINK_REAL_SWEEP_CSV)",
)
def test_real_data_directional_checks():
    """Directional checks on a sweep CSV produced from real CLIP embeddings.

    Expects the CSV of `semlink sweep` over trained models (k=128..2048)
    plus the baseline, on the CIFAR100 test transmit/KB halves, with SNRs
    covering at least [-7..10] and one cell at or below -30 dB.
    """
    import csv as csv_mod

    rows = []
    with open(os.environ["SEMLINK_REAL_SWEEP_CSV"]) as fh:
        for row in csv_mod.DictReader(fh):
            rows.append(
                {
                    "channel": row["channel"],
                    "k": int(row["k"]),
                    "snr": float(row["snr_db"]),
                    "acc": float(row["accuracy"]),
                    "model": row["model_id"],
                }
            )

    def acc(channel, model, snr):
        found = [r["acc"] for r in rows if r["channel"] == channel
                 and r["model"] == model and r["snr"] == snr]
        assert found, f"missing cell {channel}/{model}/{snr}"
        return found[0]

    # (a) compressed k=128 within 5 points of the baseline at high SNR
    for snr in (7.0, 10.0):
        assert acc("awgn", "k128", snr) >= acc("awgn", "baseline", snr) - 0.05
    # (b) k=2048 beats the baseline at low SNR
    for snr in (-7.0, -4.0):
        assert acc("awgn", "k2048", snr) > acc("awgn", "baseline", snr)
    # (c) Rayleigh within 2 points below AWGN per cell
    for r in rows:
        if r["channel"] != "rayleigh":
            continue
        awgn_acc = [a["acc"] for a in rows if a["channel"] == "awgn"
                    and a["model"] == r["model"] and a["snr"] == r["snr"]]
        if awgn_acc:
            assert r["acc"] <= awgn_acc[0] + 0.02
    # (d) chance floor of roughly 1% at very low SNR
    floor_rows = [r for r in rows if r["snr"] <= -30.0]
    assert floor_rows, "no very-low-SNR cell in the sweep"
    for r in floor_rows:
        assert abs(r["acc"] - 0.01) <= 0.01
    print("ACCEPTANCE real-data-directional: PASS")
