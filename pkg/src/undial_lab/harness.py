"""Experiment orchestration: base training, unlearning runs, sweeps, sequential requests, reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .aux_unlearn import AuxMethod, AuxSpec, build_aux_model, train_memo_model
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusConfig, generate_corpus, split_records, split_sequential, to_arrays
from .errors import InvalidArgumentError, NonFiniteLossError
from .metrics import (MetricsConfig, MetricsReport, avg_kl_from_logprobs, evaluate,
                      extraction_likelihood_batch, log_probs, memorization_accuracy_batch, perplexity)
from .model import LmConfig, OptimizerState, TinyLM, train_step
from .objectives import Method, TeacherSnapshot, UnlearnSpec, make_objective, nll_loss

log = logging.getLogger(__name__)

CONVERGED_MA = 0.2
DYNAMICS_FIELDS = ("run", "step", "forget_kl", "retain_kl", "forget_ma", "retain_ppl", "loss")
PARETO_FIELDS = ("method", "strength", "point", "step", "el3", "retain_ppl", "ma", "rep3", "status")
SEQUENTIAL_FIELDS = ("method", "request", "forget_ma", "retain_ppl", "retain_ppl_ratio", "status")
SCALING_FIELDS = ("method", "n_forget", "forget_ma", "el3", "retain_ppl", "retain_ppl_ratio", "status")

AUX_NAMES = {"dp": AuxMethod.DP, "ta": AuxMethod.TA, "cd": AuxMethod.CD_RELU,
             "cd_plain": AuxMethod.CD_PLAIN, "cd_relu": AuxMethod.CD_RELU}


@dataclass
class ExperimentConfig:
    """Everything a run needs.  ``seed`` overrides the model and corpus seeds."""

    # dropout only acts during base/reference training; unlearning runs deterministically
    lm: LmConfig = field(default_factory=lambda: LmConfig(dropout=0.1))
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    unlearn: UnlearnSpec | AuxSpec = field(default_factory=UnlearnSpec)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    eval_every: int = 10
    seed: int = 0
    output_dir: str = "runs"
    batch_size: int = 64
    base_lr: float = 2e-3
    base_max_steps: int = 2000
    base_check_every: int = 50
    base_ma_target: float = 0.95
    # MA alone stops too early: greedy continuations still drift off the memorised suffix
    base_el_target: float | None = 0.9
    memo_steps: int = 100
    stop_at_forget_ma: float | None = None

    def __post_init__(self):
        if self.eval_every < 1:
            raise InvalidArgumentError("eval_every must be >= 1")
        if self.batch_size < 1 or self.base_max_steps < 0 or self.base_check_every < 1:
            raise InvalidArgumentError("batch_size and base_check_every must be >= 1")
        if self.lm.vocab_size != self.corpus.vocab_size:
            raise InvalidArgumentError("lm.vocab_size must equal corpus.vocab_size")
        if self.lm.context_len < self.corpus.seq_len:
            raise InvalidArgumentError("lm.context_len shorter than corpus.seq_len")
        self.lm = replace(self.lm, seed=self.seed)
        self.corpus = replace(self.corpus, seed=self.seed)

    @property
    def method_name(self) -> str:
        return self.unlearn.method.value

    def to_dict(self) -> dict:
        return {"lm": self.lm.to_dict(), "corpus": self.corpus.to_dict(),
                "unlearn": {"kind": "aux" if isinstance(self.unlearn, AuxSpec) else "direct",
                            **_spec_dict(self.unlearn)},
                "metrics": self.metrics.to_dict(),
                **{k: getattr(self, k) for k in _SCALARS}}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        try:
            kw = {k: d[k] for k in _SCALARS if k in d}
            if "lm" in d:
                kw["lm"] = LmConfig.from_dict(d["lm"])
            if "corpus" in d:
                kw["corpus"] = CorpusConfig.from_dict(d["corpus"])
            if "metrics" in d:
                kw["metrics"] = MetricsConfig.from_dict(d["metrics"])
            if "unlearn" in d:
                kw["unlearn"] = make_spec(**d["unlearn"])
            return cls(**kw)
        except (TypeError, KeyError) as e:
            raise InvalidArgumentError(f"bad experiment config: {e}") from None

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path}: not valid JSON ({e})") from None


_SCALARS = ("eval_every", "seed", "output_dir", "batch_size", "base_lr", "base_max_steps",
            "base_check_every", "base_ma_target", "base_el_target", "memo_steps", "stop_at_forget_ma")


def _spec_dict(spec) -> dict:
    if isinstance(spec, UnlearnSpec):
        return spec.to_dict()
    d = asdict(spec)
    d["method"] = spec.method.value
    return d


def make_spec(method="undial", strength=None, steps=None, kind=None, **kw):
    """UnlearnSpec for direct-tuning methods, AuxSpec for dp/ta/cd."""
    name = str(getattr(method, "value", method)).lower()
    if name in AUX_NAMES or kind == "aux":
        aux = AUX_NAMES.get(name, name)
        coeff = kw.pop("coeff", None)
        coeff = strength if strength is not None else coeff
        aux_kw = {k: v for k, v in kw.items() if k in AuxSpec.__dataclass_fields__}
        return AuxSpec(method=aux, **({} if coeff is None else {"coeff": coeff}), **aux_kw)
    spec_kw = {k: v for k, v in kw.items() if k in UnlearnSpec.__dataclass_fields__}
    if strength is not None:
        spec_kw["strength"] = strength
    if steps is not None:
        spec_kw["steps"] = steps
    return UnlearnSpec(method=name, **spec_kw)


@dataclass
class CorpusArrays:
    forget: np.ndarray
    forget_mask: np.ndarray
    retain: np.ndarray
    records: list

    @classmethod
    def from_config(cls, cfg: CorpusConfig) -> CorpusArrays:
        records = generate_corpus(cfg)
        f, r = split_records(records)
        ft, fm = to_arrays(f)
        rt, _ = to_arrays(r)
        return cls(ft, fm, rt, records)


@dataclass
class DynamicsLog:
    steps: list[int] = field(default_factory=list)
    forget_kl: list[float] = field(default_factory=list)
    retain_kl: list[float] = field(default_factory=list)
    forget_ma: list[float] = field(default_factory=list)
    retain_ppl: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    def append(self, step, forget_kl, retain_kl, forget_ma, retain_ppl, loss) -> None:
        if self.steps and step <= self.steps[-1]:
            raise InvalidArgumentError(f"step {step} not after {self.steps[-1]}")
        self.steps.append(int(step))
        self.forget_kl.append(float(forget_kl))
        self.retain_kl.append(float(retain_kl))
        self.forget_ma.append(float(forget_ma))
        self.retain_ppl.append(float(retain_ppl))
        self.loss.append(float(loss))

    def __len__(self):
        return len(self.steps)

    def rows(self, run: str = "") -> list[dict]:
        return [{"run": run, "step": s, "forget_kl": fk, "retain_kl": rk, "forget_ma": fm,
                 "retain_ppl": rp, "loss": lo}
                for s, fk, rk, fm, rp, lo in zip(self.steps, self.forget_kl, self.retain_kl,
                                                  self.forget_ma, self.retain_ppl, self.loss)]

    def first_step_below(self, ma: float = CONVERGED_MA) -> int | None:
        for s, m in zip(self.steps, self.forget_ma):
            if m <= ma:
                return s
        return None

    def value_at(self, name: str, step: int) -> float:
        return getattr(self, name)[self.steps.index(step)]


@dataclass
class BaseResult:
    base: TinyLM
    reference: TinyLM
    forget_ma: float
    reference_forget_ma: float
    steps: int
    status: str
    paths: dict = field(default_factory=dict)


@dataclass
class UnlearnResult:
    model: object
    log: DynamicsLog
    report: MetricsReport | None
    status: str = "ok"
    collapse_step: int | None = None
    converged_step: int | None = None
    converged_report: MetricsReport | None = None
    memo: TinyLM | None = None
    paths: dict = field(default_factory=dict)


def _train_lm(cfg: ExperimentConfig, data: np.ndarray, steps: int, stop=None) -> tuple[TinyLM, int]:
    model = TinyLM(cfg.lm)
    opt = OptimizerState.for_model(model, lr=cfg.base_lr)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(data))
    objective = lambda m, b: nll_loss(m.forward(b, train=True), b)  # noqa: E731
    for step in range(1, steps + 1):
        idx = rng.choice(len(data), bs, replace=False)
        train_step(model, opt, data[idx], objective)
        if stop is not None and step % cfg.base_check_every == 0 and stop(model):
            return model, step
    return model, steps


def run_train_base(cfg: ExperimentConfig, data: CorpusArrays | None = None,
                   out_dir: str | Path | None = None) -> BaseResult:
    """Train on forget + retain until forget MA reaches the target, then a retain-only reference."""
    data = data or CorpusArrays.from_config(cfg.corpus)
    both = np.concatenate([data.forget, data.retain])

    def forget_el(m):
        return extraction_likelihood_batch(m, data.forget[:cfg.metrics.max_gen_sequences],
                                           cfg.metrics.n_gram, cfg.metrics.stride).mean()

    def reached(m):
        if memorization_accuracy_batch(m, data.forget).mean() < cfg.base_ma_target:
            return False
        return cfg.base_el_target is None or forget_el(m) >= cfg.base_el_target

    base, steps = _train_lm(cfg, both, cfg.base_max_steps, stop=reached)
    base_ma = float(memorization_accuracy_batch(base, data.forget).mean())
    status = "ok" if reached(base) else "warning"
    if status == "warning":
        log.warning("memorisation targets not met after %d steps (forget MA %.3f)", steps, base_ma)
    reference, _ = _train_lm(cfg, data.retain, steps)
    ref_ma = float(memorization_accuracy_batch(reference, data.forget).mean())
    base.meta.update({"role": "base", "steps": steps, "forget_ma": base_ma})
    reference.meta.update({"role": "reference", "steps": steps})
    result = BaseResult(base, reference, base_ma, ref_ma, steps, status)
    if out_dir is not None:
        out = Path(out_dir)
        result.paths = {"base": str(save_checkpoint(base, out / "base.ckpt")),
                        "reference": str(save_checkpoint(reference, out / "reference.ckpt"))}
        (out / "base.json").write_text(json.dumps(
            {"status": status, "steps": steps, "forget_ma": base_ma,
             "reference_forget_ma": ref_ma, "config": cfg.to_dict()}, indent=2))
    return result


def _as_model(m) -> TinyLM:
    return load_checkpoint(m) if isinstance(m, (str, Path)) else m


class _Probe:
    """Cached reference log-probs so dynamics points cost one forward per split."""

    def __init__(self, reference: TinyLM, forget: np.ndarray, retain: np.ndarray):
        self.forget, self.retain = forget, retain
        self.lp_forget = log_probs(reference, forget)
        self.lp_retain = log_probs(reference, retain)

    def measure(self, model) -> tuple[float, float, float, float]:
        fk = avg_kl_from_logprobs(log_probs(model, self.forget), self.lp_forget)
        rk = avg_kl_from_logprobs(log_probs(model, self.retain), self.lp_retain)
        ma = float(memorization_accuracy_batch(model, self.forget).mean())
        return fk, rk, ma, perplexity(model, self.retain)


def _final_report(model, data_forget, retain, reference, cfg, step, status):
    return evaluate(model, {"forget": data_forget, "retain": retain}, cfg.metrics,
                    reference=reference, method=cfg.method_name,
                    strength=float(getattr(cfg.unlearn, "strength", getattr(cfg.unlearn, "coeff", 0.0))),
                    step=step, seed=cfg.seed, meta={"status": status})


def run_unlearn(cfg: ExperimentConfig, base, reference, data: CorpusArrays | None = None,
                forget: np.ndarray | None = None, forget_mask: np.ndarray | None = None,
                steps: int | None = None, evaluate_final: bool = True,
                out_dir: str | Path | None = None) -> UnlearnResult:
    """Apply ``cfg.unlearn`` to ``base`` and log forget/retain KL to ``reference`` along the way.

    ``forget``/``forget_mask`` override the corpus forget split (sequential requests).
    ``steps=0`` returns the base model unchanged.
    """
    base, reference = _as_model(base), _as_model(reference)
    base.check_compatible(reference)
    data = data or CorpusArrays.from_config(cfg.corpus)
    forget = data.forget if forget is None else forget
    forget_mask = data.forget_mask if forget_mask is None else forget_mask
    probe = _Probe(reference, forget, data.retain)

    if isinstance(cfg.unlearn, AuxSpec):
        result = _run_aux(cfg, base, forget, probe)
    else:
        n_steps = cfg.unlearn.steps if steps is None else steps
        result = _run_direct(cfg, base, forget, forget_mask, data.retain, probe, n_steps)

    if evaluate_final:
        final_step = result.log.steps[-1] if len(result.log) else 0
        result.report = _final_report(result.model, forget, data.retain, reference, cfg,
                                      final_step, result.status)
        if result.converged_report is not None:
            m, s = result.converged_report
            result.converged_report = _final_report(m, forget, data.retain, reference, cfg, s, result.status)
    elif result.converged_report is not None:
        result.converged_report = None
    if out_dir is not None:
        _save_run(result, cfg, Path(out_dir))
    return result


def _run_direct(cfg, base, forget, forget_mask, retain, probe, n_steps) -> UnlearnResult:
    spec: UnlearnSpec = cfg.unlearn
    model = base.copy()
    model.meta = {**base.meta, "role": "unlearned", "method": spec.method.value}
    teacher = TeacherSnapshot(base)
    objective = make_objective(spec, teacher)
    opt = OptimizerState.for_model(model, lr=spec.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    bs = min(cfg.batch_size, len(forget))
    dyn = DynamicsLog()
    result = UnlearnResult(model, dyn, None)
    stop_ma = cfg.stop_at_forget_ma
    last_loss = float("nan")
    retain_pos = 0

    def record(step):
        fk, rk, ma, ppl = probe.measure(model)
        if not all(map(math.isfinite, (fk, rk, ma, ppl))):
            raise NonFiniteLossError(f"non-finite metrics at step {step}", {"step": step})
        dyn.append(step, fk, rk, ma, ppl, last_loss)
        if result.converged_step is None and ma <= CONVERGED_MA:
            result.converged_step = step
            result.converged_report = (model.copy(), step)
        return ma

    try:
        record(0)
        for step in range(1, n_steps + 1):
            idx = np.arange(len(forget)) if bs == len(forget) else rng.choice(len(forget), bs, replace=False)
            batch = {"tokens": forget[idx], "key_mask": forget_mask[idx]}
            if spec.retain_reg.value != "none":
                # retain batches walk the retain set round-robin
                take = np.arange(retain_pos, retain_pos + bs) % len(retain)
                retain_pos = int(take[-1] + 1) % len(retain)
                batch["retain_tokens"] = retain[take]
            _, _, last_loss = train_step(model, opt, batch, objective)
            if step % cfg.eval_every == 0 or step == n_steps:
                ma = record(step)
                if stop_ma is not None and ma <= stop_ma:
                    break
    except NonFiniteLossError as e:
        result.status = "collapsed"
        result.collapse_step = int(e.diagnostics.get("step", opt.step))
        log.info("run collapsed at step %s: %s", result.collapse_step, e)
    return result


def _run_aux(cfg, base, forget, probe) -> UnlearnResult:
    spec: AuxSpec = cfg.unlearn
    memo = None
    if spec.needs_memo:
        if spec.memo_checkpoint:
            memo = load_checkpoint(spec.memo_checkpoint)
        else:
            memo = train_memo_model(base, forget, cfg.memo_steps, lr=cfg.base_lr,
                                    batch_size=cfg.batch_size, seed=cfg.seed)
    model = build_aux_model(base, spec, memo)
    dyn = DynamicsLog()
    fk, rk, ma, ppl = probe.measure(model)
    dyn.append(0, fk, rk, ma, ppl, float("nan"))
    result = UnlearnResult(model, dyn, None)
    result.memo = memo
    if ma <= CONVERGED_MA:
        result.converged_step = 0
    return result


def _save_run(result: UnlearnResult, cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(result.model, TinyLM):
        result.paths["model"] = str(save_checkpoint(result.model, out / "unlearned.ckpt",
                                                    meta={"status": result.status}))
    if result.memo is not None:
        result.paths["memo"] = str(save_checkpoint(result.memo, out / "memo.ckpt", flags={"memo": True}))
    with open(out / "dynamics.jsonl", "w") as f:
        for row in result.log.rows(cfg.method_name):
            f.write(json.dumps(row) + "\n")
    if result.report is not None:
        (out / "metrics.jsonl").write_text(result.report.to_jsonl())
    (out / "run.json").write_text(json.dumps(
        {"status": result.status, "collapse_step": result.collapse_step,
         "converged_step": result.converged_step, "config": cfg.to_dict()}, indent=2))


def _pareto_rows(cfg: ExperimentConfig, strength: float, result: UnlearnResult) -> list[dict]:
    rows = []
    points = [("final", result.report)]
    if result.converged_report is not None:
        points.append(("converged", result.converged_report))
    for point, rep in points:
        f, r = rep["forget"], rep["retain"]
        rows.append({"method": cfg.method_name, "strength": strength, "point": point, "step": rep.step,
                     "el3": f.el_n, "retain_ppl": r.ppl, "ma": f.ma, "rep3": f.rep_n,
                     "status": result.status})
    return rows


def _sweep_point(args):
    cfg, strength, base, reference, data = args
    if strength == 0 and not isinstance(cfg.unlearn, AuxSpec):
        # zero strength is the untouched base model
        return strength, run_unlearn(cfg, base, reference, data=data, steps=0)
    unlearn = replace(cfg.unlearn, **({"coeff": strength} if isinstance(cfg.unlearn, AuxSpec)
                                      else {"strength": strength}))
    return strength, run_unlearn(replace(cfg, unlearn=unlearn), base, reference, data=data)


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("UNDIAL_THREADS", "1")))
    except ValueError:
        raise InvalidArgumentError("UNDIAL_THREADS must be an integer") from None


def run_sweep(cfg: ExperimentConfig, strengths, base, reference, data: CorpusArrays | None = None,
              out_dir: str | Path | None = None) -> list[dict]:
    """One unlearning run per strength from the same base; rows sorted by strength."""
    strengths = sorted(float(s) for s in strengths)
    if not strengths:
        raise InvalidArgumentError("strengths must not be empty")
    base, reference = _as_model(base), _as_model(reference)
    data = data or CorpusArrays.from_config(cfg.corpus)
    jobs = [(cfg, s, base, reference, data) for s in strengths]
    workers = min(n_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    rows, dynamics = [], []
    for s, res in results:
        rows.extend(_pareto_rows(cfg, s, res))
        dynamics.extend(res.log.rows(f"{cfg.method_name}@{s:g}"))
        if out_dir is not None:
            _save_run(res, cfg, Path(out_dir) / f"strength_{s:g}")
    if out_dir is not None:
        _write_csv(Path(out_dir) / "fig3_pareto.csv", PARETO_FIELDS, rows)
        _write_jsonl(Path(out_dir) / "pareto.jsonl", rows)
    return rows


def run_sequential(cfg: ExperimentConfig, k: int, base, reference, data: CorpusArrays | None = None,
                   out_dir: str | Path | None = None) -> list[dict]:
    """Unlearn ``k`` forget folds one after another, each from the previous model."""
    base, reference = _as_model(base), _as_model(reference)
    data = data or CorpusArrays.from_config(cfg.corpus)
    forget_records, _ = split_records(data.records)
    folds = split_sequential(forget_records, k)
    base_ppl = perplexity(base, data.retain)
    model, rows, status = base, [], "ok"
    seen_tokens = []
    for i, fold in enumerate(folds):
        toks, mask = to_arrays(fold)
        seen_tokens.append(toks)
        if status == "collapsed":
            rows.append({"method": cfg.method_name, "request": i + 1, "forget_ma": float("nan"),
                         "retain_ppl": float("nan"), "retain_ppl_ratio": float("nan"), "status": status})
            continue
        res = run_unlearn(cfg, model, reference, data=data, forget=toks, forget_mask=mask,
                          evaluate_final=False)
        status = res.status
        if status == "collapsed":
            rows.append({"method": cfg.method_name, "request": i + 1, "forget_ma": float("nan"),
                         "retain_ppl": float("nan"), "retain_ppl_ratio": float("nan"), "status": status})
            continue
        model = res.model
        cum = np.concatenate(seen_tokens)
        ppl = perplexity(model, data.retain)
        ma = float(memorization_accuracy_batch(model, cum).mean())
        rows.append({"method": cfg.method_name, "request": i + 1, "forget_ma": ma, "retain_ppl": ppl,
                     "retain_ppl_ratio": ppl / base_ppl if math.isfinite(ppl) else float("inf"),
                     "status": status})
    if out_dir is not None:
        _write_csv(Path(out_dir) / "fig6_sequential.csv", SEQUENTIAL_FIELDS, rows)
        _write_jsonl(Path(out_dir) / "sequential.jsonl", rows)
    return rows


def run_scaling(cfg: ExperimentConfig, sizes=(8, 32, 128), out_dir: str | Path | None = None) -> list[dict]:
    """Retrain base/reference per forget-set size and unlearn each once."""
    rows = []
    for n in sizes:
        sub = replace(cfg, corpus=replace(cfg.corpus, n_forget=int(n)))
        data = CorpusArrays.from_config(sub.corpus)
        br = run_train_base(sub, data)
        res = run_unlearn(sub, br.base, br.reference, data=data)
        base_ppl = perplexity(br.base, data.retain)
        f, r = res.report["forget"], res.report["retain"]
        rows.append({"method": cfg.method_name, "n_forget": int(n), "forget_ma": f.ma, "el3": f.el_n,
                     "retain_ppl": r.ppl, "retain_ppl_ratio": r.ppl / base_ppl, "status": res.status})
    if out_dir is not None:
        _write_csv(Path(out_dir) / "fig6_scaling.csv", SCALING_FIELDS, rows)
    return rows


def _write_csv(path: Path, fields, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_csv(path: str | Path) -> list[dict]:
    """Parse a report CSV, turning numeric cells back into numbers."""
    def conv(v):
        if v in ("", "None"):
            return None
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
        return v

    with open(path, newline="") as f:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(f)]


REPORT_TABLES = {
    "dynamics": ("fig2_dynamics.csv", DYNAMICS_FIELDS),
    "pareto": ("fig3_pareto.csv", PARETO_FIELDS),
    "scaling": ("fig6_scaling.csv", SCALING_FIELDS),
    "sequential": ("fig6_sequential.csv", SEQUENTIAL_FIELDS),
}


def write_report(runs: dict, out_dir: str | Path) -> dict:
    """Write one CSV per table plus ``summary.md``; absent tables are empty and listed as gaps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gaps, written, lines = [], {}, ["# Unlearning report", ""]
    for key, (fname, fields) in REPORT_TABLES.items():
        rows = runs.get(key) or []
        _write_csv(out / fname, fields, rows)
        written[key] = out / fname
        if not rows:
            gaps.append(key)
        lines.append(f"- {fname}: {len(rows)} rows")
    for row in runs.get("pareto") or []:
        if row.get("point") == "final":
            lines.append(f"  - {row['method']} strength={row['strength']:g}: EL3={row['el3']:.3f} "
                         f"MA={row['ma']:.3f} retain PPL={row['retain_ppl']:.3f} ({row['status']})")
    if gaps:
        lines += ["", "Missing runs: " + ", ".join(gaps)]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    written["summary"] = out / "summary.md"
    written["gaps"] = gaps
    return written


def collect_runs(root: str | Path) -> dict:
    """Gather JSONL/CSV outputs found under ``root`` into the ``write_report`` input shape."""
    root = Path(root)
    runs: dict = {"dynamics": [], "pareto": [], "scaling": [], "sequential": []}
    for p in sorted(root.rglob("dynamics.jsonl")):
        label = str(p.parent.relative_to(root)) or "."
        for line in p.read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                row["run"] = f"{label}:{row['run']}"
                runs["dynamics"].append(row)
    for key, name in (("pareto", "pareto.jsonl"), ("sequential", "sequential.jsonl")):
        for p in sorted(root.rglob(name)):
            runs[key] += [json.loads(x) for x in p.read_text().splitlines() if x.strip()]
    for p in sorted(root.rglob("fig6_scaling.csv")):
        if p.parent != root:
            runs["scaling"] += read_csv(p)
    return runs
