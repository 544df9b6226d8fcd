"""Command line entry point for undial-lab."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from .checkpoint import load_checkpoint
from .corpus import load_corpus, save_corpus, split_records, to_arrays
from .errors import IncompatibleCheckpointError, InvalidArgumentError, UndialError
from .metrics import evaluate

EXIT_OK, EXIT_INVALID, EXIT_INCOMPATIBLE = 0, 2, 3


def _load_config(args) -> H.ExperimentConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidArgumentError(f"cannot read config {args.config}: {e}") from None
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["output_dir"] = args.out
    method = getattr(args, "method", None)
    strength = getattr(args, "strength", None)
    steps = getattr(args, "steps", None)
    if method or strength is not None or steps is not None:
        spec = dict(d.get("unlearn", {}))
        if method:
            spec["method"] = method
            spec.pop("kind", None)
        if strength is not None:
            spec["strength"] = strength
            spec.pop("coeff", None)
        if steps is not None:
            spec["steps"] = steps
        d["unlearn"] = spec
    return H.ExperimentConfig.from_dict(d)


def _data(cfg, args) -> H.CorpusArrays:
    if getattr(args, "corpus", None):
        records = load_corpus(args.corpus)
        f, r = split_records(records)
        ft, fm = to_arrays(f)
        rt, _ = to_arrays(r)
        return H.CorpusArrays(ft, fm, rt, records)
    return H.CorpusArrays.from_config(cfg.corpus)


def _base_pair(cfg, args, data):
    out = Path(cfg.output_dir)
    base = Path(args.base) if args.base else out / "base.ckpt"
    ref = Path(args.reference) if args.reference else out / "reference.ckpt"
    if base.exists() and ref.exists():
        return load_checkpoint(base), load_checkpoint(ref)
    if args.base or args.reference:
        raise InvalidArgumentError(f"checkpoint not found: {base if not base.exists() else ref}")
    logging.info("no base checkpoints in %s, training them", out)
    res = H.run_train_base(cfg, data, out_dir=out)
    return res.base, res.reference


def cmd_gen_corpus(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = H.CorpusArrays.from_config(cfg.corpus)
    save_corpus(data.records, out / "corpus.jsonl")
    print(f"wrote {len(data.records)} records to {out / 'corpus.jsonl'}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _load_config(args)
    res = H.run_train_base(cfg, _data(cfg, args), out_dir=cfg.output_dir)
    print(json.dumps({"status": res.status, "steps": res.steps, "forget_ma": res.forget_ma,
                      "reference_forget_ma": res.reference_forget_ma, **res.paths}))
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = _load_config(args)
    data = _data(cfg, args)
    base, ref = _base_pair(cfg, args, data)
    run_dir = Path(cfg.output_dir) / f"{cfg.method_name}"
    res = H.run_unlearn(cfg, base, ref, data=data, out_dir=run_dir)
    print(json.dumps({"status": res.status, "collapse_step": res.collapse_step,
                      "converged_step": res.converged_step, "out": str(run_dir)}))
    sys.stdout.write(res.report.to_jsonl())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = _data(cfg, args)
    model = load_checkpoint(args.model)
    ref = load_checkpoint(args.reference) if args.reference else None
    report = evaluate(model, {"forget": data.forget, "retain": data.retain}, cfg.metrics,
                      reference=ref, method=model.meta.get("method", "base"), seed=cfg.seed)
    text = report.to_jsonl()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.jsonl").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    data = _data(cfg, args)
    base, ref = _base_pair(cfg, args, data)
    strengths = [float(s) for s in args.strengths.split(",") if s.strip()]
    rows = H.run_sweep(cfg, strengths, base, ref, data=data,
                       out_dir=Path(cfg.output_dir) / f"sweep_{cfg.method_name}")
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def cmd_sequential(args) -> int:
    cfg = _load_config(args)
    data = _data(cfg, args)
    base, ref = _base_pair(cfg, args, data)
    rows = H.run_sequential(cfg, args.k, base, ref, data=data,
                            out_dir=Path(cfg.output_dir) / f"sequential_{cfg.method_name}")
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise InvalidArgumentError(f"{runs_dir} is not a directory")
    written = H.write_report(H.collect_runs(runs_dir), args.out or runs_dir)
    print(Path(written["summary"]).read_text(), end="")
    return EXIT_OK


def _common(p: argparse.ArgumentParser, method: bool = False) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    if method:
        p.add_argument("--method", choices=["undial", "fundial", "ga", "npo", "dp", "ta", "cd"])
        p.add_argument("--strength", type=float)
        p.add_argument("--steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="undial-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write the synthetic corpus as JSONL")
    _common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-base", help="train the base and retain-only reference models")
    _common(p)
    p.add_argument("--corpus", help="corpus JSONL instead of generating one")
    p.set_defaults(func=cmd_train_base)

    for name, func, helptext in (("unlearn", cmd_unlearn, "run one unlearning method"),
                                 ("sweep", cmd_sweep, "strength sweep from one base model"),
                                 ("sequential", cmd_sequential, "sequential unlearning requests")):
        p = sub.add_parser(name, help=helptext)
        _common(p, method=True)
        p.add_argument("--corpus")
        p.add_argument("--base", help="base checkpoint (default: <out>/base.ckpt)")
        p.add_argument("--reference", help="reference checkpoint (default: <out>/reference.ckpt)")
        p.set_defaults(func=func)
        if name == "sweep":
            p.add_argument("--strengths", default="0,3,10,30")
        if name == "sequential":
            p.add_argument("--k", type=int, default=4)

    p = sub.add_parser("eval", help="metrics for a checkpoint")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--reference")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate run outputs into CSV tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IncompatibleCheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (InvalidArgumentError, UndialError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
