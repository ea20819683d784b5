"""``deepcarve`` command line: gen-data, train, eval, carve-inspect, export-filters.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

from threadpoolctl import threadpool_limits

from . import carve, data, evaluate, nn, train
from .tensor import Rng

log = logging.getLogger("deepcarve")


class UsageError(Exception):
    pass


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("", "none", "auto") else int(s)


def _floats(s: str) -> list[float] | float:
    parts = [p for p in s.replace(";", ",").split(",") if p.strip()]
    return float(parts[0]) if len(parts) == 1 else [float(p) for p in parts]


def _names(s: str) -> list[str] | None:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    return parts or None


SYNTH_KEYS: dict[str, Callable[[str], Any]] = {
    "num_attributes": int, "image_size": int, "channels": int, "cooccurrence": _floats,
    "noise": float, "amplitude": float, "background": float, "seed": int, "motifs": _names,
    "attributes": _names,
    "overlap_fraction": float, "secondary_amplitude": float,
    "train_per_class": int, "val_per_class": int, "test_per_class": int,
}

ARCH_KEYS: dict[str, Callable[[str], Any]] = {
    "architecture": str, "width": int, "hidden": int, "keep_prob": float,
}

_TRAIN_TYPES = {"int": int, "float": float, "str": str, "int | None": _opt_int}
TRAIN_KEYS: dict[str, Callable[[str], Any]] = {
    f.name: _TRAIN_TYPES[f.type] for f in fields(train.TrainConfig) if f.name != "run_dir"
}
TRAIN_KEYS.update(ARCH_KEYS)


def parse_config(text: str, schema: dict[str, Callable[[str], Any]], source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = _coerce(key, value, schema, f"{source}:{n}")
    return out


def _coerce(key: str, value: str, schema, where: str):
    if key not in schema:
        raise UsageError(f"{where}: unknown key {key!r}; known keys: {', '.join(sorted(schema))}")
    try:
        return schema[key](value)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key!r}: {exc}") from None


def resolve_config(path: str | None, overrides: list[str], schema) -> tuple[dict, str]:
    """Merge a config file with ``--set key=value`` overrides; returns values and their frozen text."""
    raw: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        text = p.read_text()
        parse_config(text, schema, path)
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                raw[k] = v
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        _coerce(k, v, schema, "--set")
        raw[k] = v
    values = {k: _coerce(k, v, schema, "config") for k, v in raw.items()}
    frozen = "".join(f"{k} = {raw[k]}\n" for k in sorted(raw))
    return values, frozen


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepcarve", description="Weakly supervised attribute CNNs with deep carving.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic weakly labelled dataset")
    g.add_argument("--spec", help="synthetic dataset config file")
    g.add_argument("--out", required=True, help="dataset directory to write")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config", help="training config file")
    t.add_argument("--data", required=True)
    t.add_argument("--run-dir", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("eval", help="top-K precision on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--run-dir", required=True)
    e.add_argument("--threads", type=int, default=1)

    c = sub.add_parser("carve-inspect", help="dump response histogram and pseudo-labels for a checkpoint")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", "--run-dir", dest="out", required=True)
    c.add_argument("--gamma", type=float, default=carve.DEFAULT_GAMMA)
    c.add_argument("--threads", type=int, default=1)

    f = sub.add_parser("export-filters", help="write a conv layer's filters as an image grid")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--layer", default=None, help="conv layer id, e.g. conv0 (default: first conv)")
    f.add_argument("--out", required=True, help="output .png or .pgm")
    return p


def cmd_gen_data(args) -> None:
    values, frozen = resolve_config(args.spec, args.set, SYNTH_KEYS)
    counts = {"train": values.pop("train_per_class", 200), "val": values.pop("val_per_class", 20),
              "test": values.pop("test_per_class", 50)}
    spec = data.SynthSpec(**values)
    out = Path(args.out)
    ds = data.generate_synthetic(spec, counts, out)
    (out / "synth.cfg").write_text(frozen)
    print(f"wrote {len(ds.train)} train, {len(ds.val)} val, {len(ds.test)} test images to {out}")


def _arch(values: dict, ds: data.WeakDataset) -> list[nn.LayerSpec]:
    name = values.pop("architecture", "mini-alexnet")
    kwargs = {k: values.pop(k) for k in ("width", "hidden", "keep_prob") if k in values}
    c, h, _ = ds.image_shape
    return nn.preset(name, ds.num_classes, c, h, **kwargs)


def cmd_train(args) -> None:
    values, frozen = resolve_config(args.config, args.set, TRAIN_KEYS)
    ds = data.load_dataset(args.data)
    specs = _arch(values, ds)
    run_dir = Path(args.run_dir)
    config = train.TrainConfig(**values, run_dir=str(run_dir))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(frozen)
    with threadpool_limits(limits=args.threads):
        if args.resume:
            net, metrics = train.resume(args.resume, ds, config)
        else:
            net = nn.build_network(specs, Rng(config.seed), ds.image_shape)
            net, metrics = train.train(ds, net, config)
    last = metrics[-1] if metrics else {}
    print(f"trained {len(metrics)} epochs; final loss {last.get('loss')}; run dir {run_dir}")


def cmd_eval(args) -> None:
    ds = data.load_dataset(args.data)
    net, _, _ = nn.load_checkpoint(args.checkpoint)
    with threadpool_limits(limits=args.threads):
        report = evaluate.evaluate(net, ds)
    out = Path(args.run_dir)
    report.write(out)
    data.write_cooccurrence_csv(out / "cooccurrence.csv", data.cooccurrence(ds, "test"), ds.attributes)
    print(f"mean top-K precision {report.mean_precision:.4f} over {len(report.records)} images")


def cmd_carve_inspect(args) -> None:
    ds = data.load_dataset(args.data)
    net, _, _ = nn.load_checkpoint(args.checkpoint)
    with threadpool_limits(limits=args.threads):
        hist, pls = carve.carve(net, ds, args.gamma)
    out = Path(args.out)
    carve.write_histogram_csv(out / "histogram.csv", hist, ds.attributes)
    carve.write_pseudo_labels_csv(out / "pseudo_labels.csv", pls, ds.attributes)
    print(f"wrote histogram ({hist.h.shape[0]} maps) and pseudo-labels ({len(pls.labels)} images) to {out}")


def cmd_export_filters(args) -> None:
    net, _, _ = nn.load_checkpoint(args.checkpoint)
    layer = args.layer or (net.conv_taps[0] if net.conv_taps else None)
    if layer is None:
        raise ValueError("network has no conv layers")
    path = evaluate.export_filter_grid(net, layer, args.out)
    print(f"wrote {path}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "carve-inspect": cmd_carve_inspect,
    "export-filters": cmd_export_filters,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"deepcarve: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"deepcarve: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"deepcarve: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
