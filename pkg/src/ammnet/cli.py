"""Command-line entry point: ``ammnet gen-data | train | eval | ablate | profile``.

Run settings are resolved in this order, later sources winning:

1. built-in defaults of :class:`ammnet.train.RunConfig`
2. the named profile (``--profile desk`` or ``--profile paper``)
3. the ``key=value`` file given by ``--config``
4. individual flags such as ``--epochs 5`` or ``--set epochs=5``

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric error, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import CLASS_NAMES, GenSpec, write_dataset
from .errors import AmmnetError, ConfigError, GenerationError
from .profiler import format_report, profile_model
from .train import (
    PROFILES,
    RunConfig,
    eval_checkpoint,
    format_study,
    load_config_file,
    run_study,
    train,
)

log = logging.getLogger("ammnet")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--profile", choices=sorted(PROFILES), help="named defaults bundle")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g = p.add_argument_group("config keys")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="V")


def resolve_config(args) -> RunConfig:
    values: dict[str, str] = {}
    if getattr(args, "profile", None):
        values.update({k: str(v) for k, v in PROFILES[args.profile].items()})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        values.update(load_config_file(path))
    for f in fields(RunConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return RunConfig.from_mapping(values).validate()


def cmd_gen_data(args) -> int:
    spec = GenSpec(size=args.size, occlusion_rate=args.occlusion, dsm_noise=args.dsm_noise)
    try:
        spec.validate()
    except GenerationError as exc:
        raise UsageError(str(exc)) from None
    hist = write_dataset(args.out, args.count, spec, args.seed)
    header = f"{'split':6s} " + " ".join(f"{n:>15s}" for n in CLASS_NAMES)
    print(header)
    for split, h in hist.items():
        print(f"{split:6s} " + " ".join(f"{int(v):15d}" for v in h))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)

    def report(rec):
        if rec["split"] == "train":
            print(f"epoch {rec['epoch']:3d} loss {rec['loss']:.4f} ({rec['seconds']:.1f}s)")
        else:
            print(f"epoch {rec['epoch']:3d} {rec['split']} mIoU {rec['miou']:.4f} mF1 {rec['mf1']:.4f} mOA {rec['moa']:.4f}")

    train(cfg, progress=None if args.quiet else report)
    print(f"run written to {cfg.out_dir} (config_hash {cfg.config_hash()})")
    return 0


def cmd_eval(args) -> int:
    rec = eval_checkpoint(args.checkpoint, args.split, data_dir=args.data_dir, out_dir=args.out,
                          save_predictions=args.save_predictions)
    print(json.dumps(rec, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    rows = run_study(args.study, cfg, seeds, args.out, jobs=args.jobs)
    table = format_study(rows)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.study}.txt").write_text(table + "\n")
    (out / f"{args.study}.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    return 0


def cmd_profile(args) -> int:
    cfg = resolve_config(args)
    reports = [(cfg, profile_model(cfg.model_config(), args.input_size))]
    if args.compare:
        values = {}
        for item in args.compare.split(","):
            if "=" not in item:
                raise UsageError(f"--compare expects KEY=VALUE pairs, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        other = RunConfig.from_mapping({**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **values}).validate()
        reports.append((other, profile_model(other.model_config(), args.input_size)))
    if args.json:
        print(json.dumps([r.to_dict() for _, r in reports], indent=2))
    elif len(reports) == 1:
        print(format_report(reports[0][1], per_layer=args.layers))
    else:
        (ca, a), (cb, b) = reports
        name = lambda c: f"{c.rgb_tier}/{c.dsm_tier if c.modality == 'multi' else '-'} {c.fusion}"
        print(f"{'':24s} {name(ca):>20s} {name(cb):>20s}")
        print(f"{'FLOPs':24s} {a.flops:20,d} {b.flops:20,d}")
        print(f"{'params':24s} {a.params:20,d} {b.params:20,d}")
        print(f"{'activation bytes':24s} {a.activation_memory_bytes:20,d} {b.activation_memory_bytes:20,d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ammnet", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic RGB/DSM/label dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--occlusion", type=float, default=0.3)
    g.add_argument("--dsm-noise", type=float, default=0.2)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    _add_run_flags(t)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--data-dir")
    e.add_argument("--out", help="directory for eval.jsonl, legend and predictions")
    e.add_argument("--save-predictions", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--study", required=True, choices=("components", "tiers", "alpha"))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", default="runs/ablate")
    a.add_argument("--jobs", type=int, default=1, help="parallel runs")
    _add_run_flags(a)
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("profile", help="count FLOPs, parameters and activation memory")
    _add_run_flags(f)
    f.add_argument("--input-size", type=int, default=64)
    f.add_argument("--compare", help="second config as comma-separated KEY=VALUE overrides")
    f.add_argument("--layers", action="store_true", help="print per-layer rows")
    f.add_argument("--json", action="store_true")
    f.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except AmmnetError as exc:
        print(f"ammnet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ammnet: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
