"""Memorise a synthetic forget set, then remove it with UNDIAL and with gradient ascent.

Runs on a laptop CPU in roughly 10 minutes with the default sizes.  Pass
--quick for a shrunken model that finishes in well under a minute (the
numbers are then only illustrative).

    python3 demos/memorize_then_unlearn.py --out demo_runs
"""

import argparse
from dataclasses import replace
from pathlib import Path

from undial_lab import harness as H
from undial_lab.corpus import CorpusConfig
from undial_lab.metrics import MetricsConfig, perplexity
from undial_lab.model import LmConfig


def quick_config() -> H.ExperimentConfig:
    return H.ExperimentConfig(
        lm=LmConfig(vocab_size=64, d_model=32, n_layers=1, n_heads=2, context_len=32, dropout=0.1),
        corpus=CorpusConfig(vocab_size=64, seq_len=32, n_forget=8, n_retain=48),
        metrics=MetricsConfig(stride=4),
        base_max_steps=600, base_el_target=None)


def show(tag, report, base_ppl):
    f, r = report["forget"], report["retain"]
    print(f"     {tag:<22} forget MA {f.ma:.3f}  EL3 {f.el_n:.3f}  "
          f"retain PPL {r.ppl:.3f} ({r.ppl / base_ppl:.2f}x base)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_runs")
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()

    cfg = quick_config() if args.quick else H.ExperimentConfig()
    out = Path(args.out)
    data = H.CorpusArrays.from_config(cfg.corpus)
    n_key = int(data.forget_mask.sum())
    print(f"corpus: {len(data.forget)} forget / {len(data.retain)} retain sequences, "
          f"{n_key} tagged key tokens in the forget split")

    print("1. training base (forget + retain) and reference (retain only)")
    br = H.run_train_base(cfg, data, out_dir=out)
    base_ppl = perplexity(br.base, data.retain)
    print(f"   {br.steps} steps, base forget MA {br.forget_ma:.3f}, "
          f"reference forget MA {br.reference_forget_ma:.3f}")

    print("2. unlearning")
    results = {}
    for name, spec in [("undial", H.make_spec("undial", 10.0, steps=200)),
                       ("fundial", H.make_spec("fundial", 10.0, steps=200)),
                       ("ga", H.make_spec("ga", steps=200))]:
        res = H.run_unlearn(replace(cfg, unlearn=spec), br.base, br.reference, data=data,
                            out_dir=out / name)
        results[name] = res
        conv = "not reached" if res.converged_step is None else f"reached at step {res.converged_step}"
        print(f"   {name}: status {res.status}, forget MA <= {H.CONVERGED_MA} {conv}")
        if res.converged_report is not None:
            show(f"{name} @ convergence", res.converged_report, base_ppl)
        show(f"{name} @ final", res.report, base_ppl)

    print("3. retain KL to the reference along the way")
    for name, res in results.items():
        lg = res.log
        pts = [(s, k) for s, k in zip(lg.steps, lg.retain_kl) if s % 50 == 0]
        print(f"   {name:<8}" + "  ".join(f"{s}:{k:.2f}" for s, k in pts))

    runs = H.collect_runs(out)
    written = H.write_report(runs, out / "report")
    print(f"report tables in {out / 'report'} (missing: {', '.join(written['gaps']) or 'none'})")


if __name__ == "__main__":
    main()
