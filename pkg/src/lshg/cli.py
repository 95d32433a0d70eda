"""Command-line front end: ``lshg <command> ...``.

Exit codes: 0 success, 1 usage/validation error, 2 numeric gate failure
(gradient check, count audit, non-finite values), 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, get_type_hints

import numpy as np

from . import accounting, gradcheck
from .checkpoint import load_checkpoint
from .errors import ConfigError, ConsistencyError, FormatError, LshgError, NumericError
from .evaluation import bench, decode_heatmaps, pckh, predict
from .hourglass import PRESETS, NetworkConfig, build_network
from .pipeline.annotations import parse_annotations, save_image, write_annotations
from .pipeline.synth import make_synthetic_dataset
from .pipeline.train import TrainConfig, train
from .pipeline.transforms import prepare_sample

log = logging.getLogger("lshg")

ANNOTATION_FILE = "annotations.jsonl"
ALIASES = {"original_1stack": "hg1", "dw1_1stack": "dw1_1", "original_2stack": "hg2", "dw1_2stack": "dw1_2"}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr: float = 5e-4
    batch_size: int = 6
    epochs: int = 220
    seed: int = 0
    sigma: float = 1.0
    augment: bool = True
    pad_last_batch: bool = False
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                           sigma=self.sigma, augment=self.augment, pad_last_batch=self.pad_last_batch,
                           out_dir=self.out_dir)


NETWORK_KEYS = [f.name for f in fields(NetworkConfig)]
RUN_KEYS = [f.name for f in fields(RunConfig) if f.name != "network"]
VALID_KEYS = ["preset"] + NETWORK_KEYS + RUN_KEYS


def _parse_value(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind in (str, Optional[str]):
            return raw
        # tuple of ints
        return tuple(int(p) for p in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def apply_settings(cfg: RunConfig, settings) -> RunConfig:
    """``settings`` is an iterable of (key, raw string) pairs applied in order."""
    net_types = get_type_hints(NetworkConfig)
    run_types = get_type_hints(RunConfig)
    net, run = cfg.network.to_dict(), {}
    for key, raw in settings:
        if key == "preset":
            net = resolve_preset(raw.strip()).to_dict()
        elif key in NETWORK_KEYS:
            net[key] = _parse_value(net_types[key], raw, key)
        elif key in RUN_KEYS:
            run[key] = _parse_value(run_types[key], raw, key)
        else:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")
    return replace(cfg, network=NetworkConfig.from_dict(net), **run)


def read_config_file(path) -> List[tuple]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out.append((key.strip(), value))
    return out


def resolve_preset(name: str) -> NetworkConfig:
    name = ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; presets: {', '.join(list(PRESETS) + list(ALIASES))}")
    return PRESETS[name]


def load_run_config(spec: Optional[str], overrides=()) -> RunConfig:
    cfg = RunConfig()
    settings = []
    if spec:
        if Path(spec).is_file():
            settings = read_config_file(spec)
        else:
            settings = [("preset", spec)]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        settings.append((key.strip(), value))
    return apply_settings(cfg, settings)


def _config_label(spec: Optional[str]) -> str:
    return Path(spec).stem if spec and Path(spec).is_file() else (spec or "default")


# -- commands ----------------------------------------------------------------

def cmd_count_params(args) -> int:
    if args.all_table1:
        rows = accounting.reconcile_reference(tuple(args.widths))
        report = accounting.format_reconciliation(rows)
        print(report, end="")
        if args.report:
            Path(args.report).write_text(report)
        if not all(r.consistent for r in rows):
            raise ConsistencyError("enumerated and closed-form counts disagree")
        return 0
    for spec in args.config or [None]:
        cfg = load_run_config(spec, args.set).network
        a = accounting.audit(cfg)
        print(f"{_config_label(spec)}\tparams={a.params}\tclosed_form={a.closed_form_params}\t"
              f"MiB={accounting.mib(a.params):.2f}\tmacs={a.macs}\tclosed_form_macs={a.closed_form_macs}\taudit=ok")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.variant, args.seed, args.samples)
    print(gradcheck.format_results(results))
    failed = [r for r in results if not r.ok]
    if failed:
        for r in failed:
            print(f"FAILED: {r.component} at {r.where} (rel err {r.worst:.3e})", file=sys.stderr)
        return 2
    print(f"all {len(results)} components below {gradcheck.TOLERANCE:g}")
    return 0


def _load_dataset(data_dir):
    data_dir = Path(data_dir)
    anns = parse_annotations(data_dir / ANNOTATION_FILE)
    return [(None, a) for a in anns], data_dir


def _train_overrides(args):
    sets = list(args.set)
    for key in ("epochs", "batch_size", "lr", "seed"):
        value = getattr(args, key)
        if value is not None:
            sets.append(f"{key}={value}")
    if args.no_augment:
        sets.append("augment=false")
    if args.pad_last_batch:
        sets.append("pad_last_batch=true")
    if args.data:
        sets.append(f"data_dir={args.data}")
    if args.out:
        sets.append(f"out_dir={args.out}")
    return sets


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    if not cfg.data_dir:
        raise ConfigError("train needs --data (or data_dir in the config)")
    if not cfg.out_dir:
        raise ConfigError("train needs --out (or out_dir in the config)")
    dataset, base = _load_dataset(cfg.data_dir)
    net = build_network(cfg.network, seed=cfg.seed)
    result = train(net, dataset, cfg.train_config(), base_dir=base)
    for epoch, loss in enumerate(result.history):
        print(f"epoch {epoch}\tmean_loss {loss:.6g}")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    dataset, base = _load_dataset(args.data)
    anns = [a for _, a in dataset]
    if args.oracle_targets:
        res = load_run_config(args.config, args.set).network.input_res
        preds = []
        for a in anns:
            s = prepare_sample(None, a, res=res, base_dir=base)
            preds.append(decode_heatmaps(s.targets, s.meta, args.quarter_offset, res // s.targets.shape[-1])[0])
        preds = np.array(preds)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --oracle-targets is given")
        net = load_checkpoint(args.checkpoint)
        res = net.config.input_res
        samples = [prepare_sample(None, a, res=res, base_dir=base) for a in anns]
        preds = predict(net, samples, quarter_offset=args.quarter_offset)
    report = pckh(preds, anns, args.threshold)
    print(report.format())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "pckh.csv")
    return 0


def cmd_bench(args) -> int:
    print("config\tparams\tmacs\tmedian_s\tp10_s\tp90_s")
    sets = list(args.set)
    if args.input_res:
        sets += [f"input_res={args.input_res}", f"heatmap_res={args.input_res // 4}"]
    for spec in args.config or [None]:
        cfg = load_run_config(spec, sets).network
        net = build_network(cfg, seed=args.seed)
        r = bench(net, None, args.iterations, args.warmup, seed=args.seed)
        print(f"{_config_label(spec)}\t{r['params']}\t{r['macs']}\t{r['median']:.4f}\t{r['p10']:.4f}\t{r['p90']:.4f}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_synthetic_dataset(args.n, args.seed, args.image_size)
    for image, ann in data:
        save_image(out / ann.image_ref, image)
    write_annotations(out / ANNOTATION_FILE, [a for _, a in data])
    print(f"wrote {len(data)} images and {ANNOTATION_FILE} to {out}")
    return 0


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


CONFIG_HELP = (
    "config files hold 'key = value' lines (# starts a comment). Keys: "
    + ", ".join(VALID_KEYS)
    + ". 'preset' loads a named network first. --config also accepts a preset name: "
    + ", ".join(list(PRESETS) + list(ALIASES)) + "."
)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lshg", description="Lightweight stacked hourglass toolkit", epilog=CONFIG_HELP)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", action="append", help="config file or preset name (repeatable)")
        else:
            sp.add_argument("--config", help="config file or preset name")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, default=None if not multi else 0)

    sp = sub.add_parser("count-params", help="parameter/MAC audit and the reference-count reconciliation",
                        epilog=CONFIG_HELP)
    common(sp, multi=True)
    sp.add_argument("--all-table1", action="store_true")
    sp.add_argument("--widths", type=int, nargs="+", default=[128, 256])
    sp.add_argument("--report", help="also write the reconciliation report here")
    sp.set_defaults(func=cmd_count_params)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--variant", default="dw1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=6, help="probed entries per tensor")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("train", help="train on a data directory", epilog=CONFIG_HELP)
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--pad-last-batch", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PCKh of a checkpoint on a data directory", epilog=CONFIG_HELP)
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--quarter-offset", action="store_true")
    sp.add_argument("--oracle-targets", action="store_true",
                    help="score decoded ground-truth targets instead of network output")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="forward timing, MACs and parameters", epilog=CONFIG_HELP)
    common(sp, multi=True)
    sp.add_argument("--iterations", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--input-res", type=int, help="rebuild each config at this input resolution")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("synth", help="write a synthetic stick-figure dataset")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-size", type=int, default=256)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConsistencyError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (LshgError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
