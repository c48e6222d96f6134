"""End-to-end evaluation: semantic accuracy, sweeps, latency measurement.

Semantic accuracy counts transmissions whose nearest KB entry shares the
transmitted item's class label. Every (item, trial) pair draws its channel
realization from its own derived stream, so serial, threaded and re-run
evaluations agree exactly.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import channel as ch
from .codec import FEATURE_DIM, CodecParams, decode, encode
from .embedding_io import EmbeddingDataset
from .knowledge_base import KnowledgeBase, search_batch
from .streams import derive_seed, stream_id, make_rng

CSV_HEADER = "channel,cbr_num,cbr_den,k,snr_db,accuracy,n_items,trials,model_id,seed"

_QUERY_BLOCK = 1024


class UncompressedBaseline:
    """Reference scheme: the raw feature vector is the channel input.

    The receiver undoes the transmitter's power scale (the identity codec
    has no decoder to learn magnitudes).
    """

    k = FEATURE_DIM

    def __repr__(self):
        return "UncompressedBaseline()"


BASELINE = UncompressedBaseline()


@dataclass
class EvalConfig:
    channel: ch.ChannelConfig
    trials_per_item: int = 10
    seed: int | None = None  # root for stream derivation; channel.seed when None

    def __post_init__(self):
        if self.trials_per_item < 1:
            raise ValueError("trials_per_item must be >= 1")

    @property
    def effective_seed(self) -> int:
        return self.channel.seed if self.seed is None else self.seed


@dataclass
class SweepRow:
    channel: str
    cbr: Fraction
    k: int
    snr_db: float
    accuracy: float
    n_items: int
    trials: int
    model_id: str
    seed: int


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                ",".join(
                    (
                        r.channel,
                        str(r.cbr.numerator),
                        str(r.cbr.denominator),
                        str(r.k),
                        _fmt(r.snr_db),
                        _fmt(r.accuracy),
                        str(r.n_items),
                        str(r.trials),
                        r.model_id,
                        str(r.seed),
                    )
                )
            )
        return "\n".join(lines) + "\n"


@dataclass
class LatencyReport:
    net_median_ms: float
    net_p95_ms: float
    kb_median_ms: float
    kb_p95_ms: float
    clip_median_ms: float | None
    n_queries: int
    kb_size: int
    total_seconds: float

    def to_dict(self) -> dict:
        return {
            "net_median_ms": self.net_median_ms,
            "net_p95_ms": self.net_p95_ms,
            "kb_median_ms": self.kb_median_ms,
            "kb_p95_ms": self.kb_p95_ms,
            "clip_median_ms": self.clip_median_ms,
            "n_queries": self.n_queries,
            "kb_size": self.kb_size,
            "total_seconds": self.total_seconds,
        }


def _fmt(x: float) -> str:
    x = float(x)
    if x == float("inf"):
        return "inf"
    return repr(x)


def _check_eval_inputs(model, transmit: EmbeddingDataset, kb: KnowledgeBase) -> None:
    if transmit.dim != kb.dim:
        raise ValueError(f"transmit dim {transmit.dim} != KB dim {kb.dim}")
    if int(kb.labels.max()) >= len(transmit.class_names):
        raise ValueError("KB labels fall outside the transmit set's class space")
    if transmit.n_records == 0:
        raise ValueError("transmit set is empty")
    if isinstance(model, CodecParams):
        if transmit.dim != FEATURE_DIM:
            raise ValueError(f"codec expects {FEATURE_DIM}-dim features, dataset has {transmit.dim}")
    elif transmit.dim % 2 != 0:
        raise ValueError("baseline transmission needs an even feature dimension")


def semantic_accuracy(
    model: CodecParams | UncompressedBaseline,
    transmit: EmbeddingDataset,
    kb: KnowledgeBase,
    cfg: EvalConfig,
) -> float:
    """Fraction of (item, trial) transmissions retrieving the right class.

    Pipeline per item: encode (eval-mode) -> power normalize -> channel ->
    zero-forcing equalize -> decode -> nearest-neighbor retrieval. The
    baseline replaces the codec with the identity and undoes the power
    scale at the receiver.
    """
    _check_eval_inputs(model, transmit, kb)
    is_baseline = not isinstance(model, CodecParams)
    n_items = transmit.n_records
    y_all = transmit.vectors.astype(np.float64)
    z_all = y_all if is_baseline else encode(model, y_all, mode="eval")

    chan_cfg = ch.ChannelConfig(cfg.channel.kind, cfg.channel.snr_db, cfg.effective_seed)
    signals = []
    scales = np.empty(n_items)
    for i in range(n_items):
        sig, scales[i] = ch.normalize_power(ch.to_complex(z_all[i]))
        signals.append(sig)

    successes = 0
    width = z_all.shape[1]
    for trial in range(cfg.trials_per_item):
        received = np.empty((n_items, width))
        for i in range(n_items):
            rx, realization = ch.transmit(signals[i], chan_cfg, stream_id("eval", i, trial))
            eq, _ = ch.equalize(rx, realization)
            received[i] = ch.to_real(eq)
        y_hat = received / scales[:, None] if is_baseline else decode(model, received)
        for lo in range(0, n_items, _QUERY_BLOCK):
            block = slice(lo, min(lo + _QUERY_BLOCK, n_items))
            _, labels, _ = search_batch(kb, y_hat[block], 1)
            successes += int((labels[:, 0] == transmit.labels[block]).sum())
    return successes / (n_items * cfg.trials_per_item)


def baseline_uncompressed(transmit: EmbeddingDataset, kb: KnowledgeBase, cfg: EvalConfig) -> float:
    """Accuracy of transmitting features untouched (codec replaced by identity)."""
    return semantic_accuracy(BASELINE, transmit, kb, cfg)


def run_sweep(
    models: list[CodecParams],
    transmit: EmbeddingDataset,
    kb: KnowledgeBase,
    snr_list_db: list[float],
    channel_kinds: list[ch.ChannelKind],
    seed: int,
    trials_per_item: int = 10,
    threads: int = 1,
) -> SweepResult:
    """Evaluate every (channel, model, SNR) cell plus the uncompressed baseline.

    Rows come back sorted by (channel, cbr, model id, snr). Each cell
    derives its streams from (seed, cell index), so any thread count
    produces identical results.
    """
    if not models:
        raise ValueError("need at least one model")
    geometry = (transmit.image_height, transmit.image_width, transmit.image_channels)
    entries: list[tuple[Fraction, str, object, int]] = [
        (ch.cbr(transmit.dim, *geometry), "baseline", BASELINE, transmit.dim)
    ]
    for model in models:
        entries.append((ch.cbr(model.k, *geometry), f"k{model.k}", model, model.k))
    entries.sort(key=lambda e: (e[0], e[1]))

    kinds = sorted(ch.ChannelKind(k) for k in channel_kinds)
    snrs = sorted(float(s) for s in snr_list_db)
    cells = [
        (kind, cbr_value, model_id, model, k, snr)
        for kind in kinds
        for (cbr_value, model_id, model, k) in entries
        for snr in snrs
    ]

    def evaluate(index: int) -> float:
        kind, _, _, model, _, snr = cells[index]
        cfg = EvalConfig(
            channel=ch.ChannelConfig(kind, snr, derive_seed(seed, "sweep-cell", index)),
            trials_per_item=trials_per_item,
        )
        return semantic_accuracy(model, transmit, kb, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accuracies = list(pool.map(evaluate, range(len(cells))))
    else:
        accuracies = [evaluate(i) for i in range(len(cells))]

    rows = [
        SweepRow(
            channel=kind.value,
            cbr=cbr_value,
            k=k,
            snr_db=snr,
            accuracy=acc,
            n_items=transmit.n_records,
            trials=trials_per_item,
            model_id=model_id,
            seed=seed,
        )
        for (kind, cbr_value, model_id, _, k, snr), acc in zip(cells, accuracies)
    ]
    return SweepResult(rows)


def bench_latency(
    model: CodecParams | UncompressedBaseline,
    kb: KnowledgeBase,
    n_queries: int,
    seed: int,
) -> LatencyReport:
    """Per-query wall-clock medians for the codec and retrieval stages.

    Queries are KB entries plus small noise. The embedding-extraction
    stage is reported as absent (None): this harness never runs a live
    feature extractor.
    """
    if n_queries < 100:
        raise ValueError(f"need at least 100 queries for stable medians, got {n_queries}")
    rng = make_rng(seed, stream_id("bench-latency"))
    pick = rng.integers(0, kb.size, size=n_queries)
    queries = kb.entries[pick].astype(np.float64)
    queries += 0.01 * rng.standard_normal(queries.shape)
    is_baseline = not isinstance(model, CodecParams)

    def net_stage(q: np.ndarray) -> np.ndarray:
        if is_baseline:
            return q
        return decode(model, encode(model, q[None, :], mode="eval"))[0]

    for i in range(10):  # warm up caches and allocators
        reconstructed = net_stage(queries[i])
        search_batch(kb, reconstructed[None, :], 1)

    started = time.perf_counter()
    net_times = np.empty(n_queries)
    kb_times = np.empty(n_queries)
    for i in range(n_queries):
        t0 = time.perf_counter()
        reconstructed = net_stage(queries[i])
        t1 = time.perf_counter()
        search_batch(kb, reconstructed[None, :], 1)
        t2 = time.perf_counter()
        net_times[i] = t1 - t0
        kb_times[i] = t2 - t1
    total = time.perf_counter() - started

    return LatencyReport(
        net_median_ms=float(np.median(net_times) * 1e3),
        net_p95_ms=float(np.percentile(net_times, 95) * 1e3),
        kb_median_ms=float(np.median(kb_times) * 1e3),
        kb_p95_ms=float(np.percentile(kb_times, 95) * 1e3),
        clip_median_ms=None,
        n_queries=n_queries,
        kb_size=kb.size,
        total_seconds=total,
    )
