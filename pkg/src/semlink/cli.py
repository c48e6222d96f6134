"""Command-line entry point: dataset tooling, training, evaluation, sweeps.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure (non-finite training loss). Every run writes a JSON manifest next
to its primary output with the fully resolved configuration, seeds and
input digests, so any run can be reproduced from the manifest alone.

Values that start with a dash (SNR lists, negative SNRs) must use the
`--flag=value` form. A config file (`--config`) holds `key = value` lines
mirroring long flag names; explicit flags override it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import channel as ch
from . import codec, embedding_io, experiment
from .knowledge_base import build_kb

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def build_hash() -> str:
    """Digest of the installed package sources (identifies the build)."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


class _Parser(argparse.ArgumentParser):
    # usage failures must exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_snr(text: str) -> float:
    if text.strip().lower() == "inf":
        return float("inf")
    return float(text)


def _parse_snr_list(text: str) -> list[float]:
    values = [_parse_snr(part) for part in text.split(",") if part.strip()]
    if not values:
        raise ValueError(f"empty SNR list: {text!r}")
    return values


def _parse_channel_list(text: str) -> list[ch.ChannelKind]:
    return [ch.ChannelKind(part.strip()) for part in text.split(",") if part.strip()]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and value == float("inf"):
        return "inf"
    return value


def _write_manifest(args: argparse.Namespace, inputs: list[str | Path], output: str | Path | None) -> None:
    config = {
        k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("handler", "subcommand")
    }
    manifest = {
        "subcommand": args.subcommand,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "tool_version": f"{__version__}+{build_hash()}",
    }
    if output is not None:
        path = Path(str(output) + ".manifest.json")
    else:
        path = Path(f"semlink-{args.subcommand}.manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_kb(path: str | Path):
    return build_kb(embedding_io.load_dataset(path))


def _load_model(spec: str):
    if spec == "baseline":
        return experiment.BASELINE
    return codec.load_params(spec)


def _cmd_gen_synthetic(args) -> int:
    dataset = embedding_io.generate_synthetic(
        args.classes, args.per_class, args.dim, args.spread, args.seed
    )
    embedding_io.save_dataset(dataset, args.output)
    _write_manifest(args, [], args.output)
    print(f"wrote {dataset.n_records} records to {args.output}")
    return EXIT_OK


def _cmd_split(args) -> int:
    dataset = embedding_io.load_dataset(args.input)
    if args.kind == "train-val":
        spec = embedding_io.SplitSpec(args.seed, args.train_fraction)
        first, second = embedding_io.split_train_val(dataset, spec)
    else:
        first, second = embedding_io.split_transmit_kb(dataset, args.seed)
    embedding_io.save_dataset(first, args.out_a)
    embedding_io.save_dataset(second, args.out_b)
    _write_manifest(args, [args.input], args.out_a)
    print(f"wrote {first.n_records} + {second.n_records} records")
    return EXIT_OK


def _cmd_build_kb(args) -> int:
    dataset = embedding_io.load_dataset(args.input)
    build_kb(dataset)  # validates nonempty and finite
    canonical = dataset.subset(np.arange(dataset.n_records))
    embedding_io.save_dataset(canonical, args.output)
    _write_manifest(args, [args.input], args.output)
    print(f"indexed {canonical.n_records} entries into {args.output}")
    return EXIT_OK


def _cmd_train(args) -> int:
    train_set = embedding_io.load_dataset(args.train)
    val_transmit = embedding_io.load_dataset(args.val_transmit)
    val_kb = _load_kb(args.val_kb)
    cfg = codec.TrainConfig(
        k=args.k,
        snr_grid_db=_parse_snr_list(args.snr_grid),
        channel_kind=ch.ChannelKind(args.channel),
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        bn_momentum=args.bn_momentum,
        seed=args.seed,
    )
    params, report = codec.train(train_set, val_transmit, val_kb, cfg)
    codec.save_params(params, args.output)
    _write_manifest(args, [args.train, args.val_transmit, args.val_kb], args.output)
    report_json = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(report_json + "\n")
    else:
        print(report_json)
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = _load_model(args.model)
    transmit = embedding_io.load_dataset(args.transmit)
    kb = _load_kb(args.kb)
    cfg = experiment.EvalConfig(
        channel=ch.ChannelConfig(ch.ChannelKind(args.channel), _parse_snr(args.snr_db), args.seed),
        trials_per_item=args.trials,
    )
    accuracy = experiment.semantic_accuracy(model, transmit, kb, cfg)
    if args.output:
        Path(args.output).write_text(f"accuracy\n{experiment._fmt(accuracy)}\n")
    _write_manifest(args, [args.transmit, args.kb], args.output)
    print(experiment._fmt(accuracy))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    models = [codec.load_params(p) for p in args.model]
    transmit = embedding_io.load_dataset(args.transmit)
    kb = _load_kb(args.kb)
    result = experiment.run_sweep(
        models,
        transmit,
        kb,
        snr_list_db=_parse_snr_list(args.snr_list),
        channel_kinds=_parse_channel_list(args.channels),
        seed=args.seed,
        trials_per_item=args.trials,
        threads=args.threads,
    )
    csv_text = result.to_csv()
    if args.output:
        Path(args.output).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    _write_manifest(args, [args.transmit, args.kb, *args.model], args.output)
    return EXIT_OK


def _cmd_bench(args) -> int:
    model = _load_model(args.model)
    kb = _load_kb(args.kb)
    report = experiment.bench_latency(model, kb, args.queries, args.seed)
    report_json = json.dumps(report.to_dict(), indent=2)
    if args.output:
        Path(args.output).write_text(report_json + "\n")
    _write_manifest(args, [args.kb], args.output)
    print(report_json)
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="semlink", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"semlink {__version__} (build {build_hash()})")
    subs = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(p: _Parser) -> None:
        p.add_argument("--config", type=str, default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)

    p = subs.add_parser("gen-synthetic", help="generate clustered synthetic embeddings")
    common(p)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--spread", type=float, default=0.05)
    p.add_argument("--output", type=str, required=True)
    p.set_defaults(handler=_cmd_gen_synthetic)

    p = subs.add_parser("split", help="stratified dataset splits")
    common(p)
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--kind", choices=["train-val", "transmit-kb"], required=True)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out-a", type=str, required=True, help="train or transmit half")
    p.add_argument("--out-b", type=str, required=True, help="val or KB half")
    p.set_defaults(handler=_cmd_split)

    p = subs.add_parser("build-kb", help="canonicalize a dataset into a KB file")
    common(p)
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--output", type=str, required=True)
    p.set_defaults(handler=_cmd_build_kb)

    p = subs.add_parser("train", help="train a codec across the SNR grid")
    common(p)
    p.add_argument("--train", type=str, required=True)
    p.add_argument("--val-transmit", type=str, required=True)
    p.add_argument("--val-kb", type=str, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--channel", choices=["awgn", "rayleigh"], default="awgn")
    p.add_argument("--snr-grid", type=str, default="-7,-4,0,4,7")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--bn-momentum", type=float, default=0.1)
    p.add_argument("--output", type=str, required=True)
    p.add_argument("--report", type=str, default=None)
    p.set_defaults(handler=_cmd_train)

    p = subs.add_parser("eval", help="semantic accuracy of one configuration")
    common(p)
    p.add_argument("--model", type=str, required=True, help="model path or 'baseline'")
    p.add_argument("--transmit", type=str, required=True)
    p.add_argument("--kb", type=str, required=True)
    p.add_argument("--channel", choices=["awgn", "rayleigh"], default="awgn")
    p.add_argument("--snr-db", type=str, required=True, help="dB value or 'inf'")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--output", type=str, default=None)
    p.set_defaults(handler=_cmd_eval)

    p = subs.add_parser("sweep", help="accuracy over the (channel, CBR, SNR) grid")
    common(p)
    p.add_argument("--model", type=str, action="append", required=True, help="repeatable model path")
    p.add_argument("--transmit", type=str, required=True)
    p.add_argument("--kb", type=str, required=True)
    p.add_argument("--snr-list", type=str, required=True, help="comma-separated dB values, 'inf' allowed")
    p.add_argument("--channels", type=str, default="awgn,rayleigh")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--output", type=str, default=None)
    p.set_defaults(handler=_cmd_sweep)

    p = subs.add_parser("bench", help="per-stage latency on a KB")
    common(p)
    p.add_argument("--model", type=str, required=True, help="model path or 'baseline'")
    p.add_argument("--kb", type=str, required=True)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--output", type=str, default=None)
    p.set_defaults(handler=_cmd_bench)

    return parser


def _inject_config(argv: list[str]) -> list[str]:
    """Splice config-file entries in as flags, before the user's flags."""
    config_path = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif token.startswith("--config="):
            config_path = token.split("=", 1)[1]
    if config_path is None or not argv:
        return argv
    injected = []
    for line in Path(config_path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line is not key = value: {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        injected.append(f"--{key}={value}")
    return [argv[0], *injected, *argv[1:]]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _inject_config(argv)
        args = _build_parser().parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    except (OSError, ValueError) as error:
        print(f"semlink: error: {error}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args)
    except codec.NanLossError as error:
        print(f"semlink: numeric failure: {error}", file=sys.stderr)
        return EXIT_NUMERIC
    except (embedding_io.DatasetError, codec.ModelFileError, ValueError, OSError) as error:
        print(f"semlink: error: {error}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
