"""Command-line entry point: run, route, reward, eval, plotdata, dataset."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .consensus import ConsensusReport, partition, render_answer
from .curriculum import (
    CurriculumConfig,
    _RL,
    _ROUTE,
    cost_accounting,
    derive_seed,
    eval_accuracy,
    pretrain_reference,
    run_disctt,
)
from .policy import load_checkpoint, sample_completions, save_checkpoint
from .reward import RewardConfig, composite_reward
from .tasks import Vocabulary, gen_dataset, load_dataset, save_dataset

log = logging.getLogger("disctt")

MODES = {"disctt": None, "sft_only": "easy", "rl_only": "hard"}
PLOT_KINDS = ("accuracy_curve", "difficulty_curves", "cost")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    count: int = 200
    depth_min: int = 2
    depth_max: int = 4
    modulus: int = 11
    seed: int | None = None


@dataclass
class PolicySpec:
    feature_order: int = 1
    aligned: bool = True
    bias: bool = False
    pretrain_count: int = 300
    pretrain_steps: int = 30
    pretrain_lr: float = 20.0
    pretrain_depth_min: int = 1
    pretrain_depth_max: int = 4
    pretrain_seed: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "disctt"
    out_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}")
        self.curriculum.force_route = MODES[self.mode]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["curriculum"].pop("force_route")
        d["reward"] = d["curriculum"].pop("reward")
        return d


# ----------------------------------------------------------------- config io

def _key_lines(node, prefix=()) -> dict:
    """Map dotted key paths to 1-based source lines from a composed YAML node."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            lines[".".join(path)] = k.start_mark.line + 1
            lines.update(_key_lines(v, path))
    return lines


def _build(cls, data, section, lines, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:{lines.get(section, 1)}: '{section}' must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        where = f"{section}.{key}" if section else str(key)
        if key not in names or key == "force_route" or isinstance(value, dict):
            raise ConfigError(f"{path}:{lines.get(where, 1)}: unknown field '{where}'")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        bad = next((k for k in sorted(data, key=len, reverse=True) if k in msg), None)
        where = f"{section}.{bad}" if section and bad else (bad or section)
        line = lines.get(where, lines.get(section, 1))
        raise ConfigError(f"{path}:{line}: invalid field '{where}': {msg}") from None


def _check_types(data, cls, section, lines, path):
    for f in dataclasses.fields(cls):
        if f.name not in data or data[f.name] is None:
            continue
        v = data[f.name]
        where = f"{section}.{f.name}" if section else f.name
        kind = str(f.type)
        ok = True
        if kind.startswith("int"):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif kind.startswith("float"):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        elif kind.startswith("bool"):
            ok = isinstance(v, bool)
        elif kind.startswith("str"):
            ok = isinstance(v, str)
        if not ok:
            raise ConfigError(f"{path}:{lines.get(where, 1)}: field '{where}' expects {kind}, got {v!r}")


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{path}:{line}: malformed config: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: top level must be a mapping")
    lines = _key_lines(root)
    sections = {"dataset": DatasetSpec, "policy": PolicySpec, "curriculum": CurriculumConfig, "reward": RewardConfig}
    top = {f.name for f in dataclasses.fields(RunConfig)} | {"reward"}
    for key in data:
        if key not in top:
            raise ConfigError(f"{path}:{lines.get(str(key), 1)}: unknown field '{key}'")
    built = {}
    for name, cls in sections.items():
        sub = data.get(name) or {}
        if isinstance(sub, dict):
            _check_types(sub, cls, name, lines, path)
        built[name] = sub
    reward = _build(RewardConfig, built["reward"], "reward", lines, path)
    cur = dict(built["curriculum"])
    cur["reward"] = reward
    if isinstance(built["curriculum"], dict) and "reward" in built["curriculum"]:
        raise ConfigError(f"{path}:{lines.get('curriculum.reward', 1)}: put reward settings in the top-level 'reward' section")
    curriculum = _build(CurriculumConfig, cur, "curriculum", lines, path)
    scalars = {k: data[k] for k in ("seed", "mode", "out_dir") if k in data}
    _check_types(scalars, RunConfig, "", lines, path)
    try:
        return RunConfig(
            dataset=_build(DatasetSpec, built["dataset"], "dataset", lines, path),
            policy=_build(PolicySpec, built["policy"], "policy", lines, path),
            curriculum=curriculum,
            **scalars,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}:{lines.get('mode', 1)}: invalid field 'mode': {exc}") from None


# ------------------------------------------------------------------ commands

def _load_inputs(args):
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if not args.dataset or not Path(args.dataset).is_file():
        raise FileNotFoundError(f"dataset not found: {args.dataset}")
    params = load_checkpoint(args.checkpoint)
    problems = load_dataset(args.dataset)
    for p in problems:
        for tok in p.prompt:
            if tok not in params.vocab:
                raise ValueError(f"dataset token {tok!r} of {p.id} not in checkpoint vocabulary")
    return params, problems


def _writer(path):
    if path in (None, "-"):
        return sys.stdout
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="")


def build_dataset(cfg: RunConfig):
    ds = cfg.dataset
    seed = cfg.seed if ds.seed is None else ds.seed
    return gen_dataset(seed, ds.count, (ds.depth_min, ds.depth_max), ds.modulus)


def build_reference(cfg: RunConfig):
    """Deliberately under-trained starting policy, warm-started on held-out problems."""
    ps, m = cfg.policy, cfg.dataset.modulus
    pre = gen_dataset(ps.pretrain_seed + cfg.seed, ps.pretrain_count, (ps.pretrain_depth_min, ps.pretrain_depth_max), m)
    return pretrain_reference(
        Vocabulary.for_modulus(m), pre, ps.pretrain_steps, ps.pretrain_lr, 1.0, ps.feature_order, ps.aligned, ps.bias
    )


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg.mode = args.mode
        cfg.curriculum.force_route = MODES[args.mode]
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    problems = load_dataset(args.dataset) if args.dataset else build_dataset(cfg)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else build_reference(cfg)
    save_dataset(problems, out / "dataset.jsonl")
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    result = run_disctt(cfg.curriculum, problems, params, cfg.seed, out_dir=out)
    save_checkpoint(result.params, out / "checkpoints" / "final.json")
    evals = [m for m in result.metrics if m.phase == "eval"]
    summary = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "initial_accuracy": evals[0].accuracy_majority,
        "final_accuracy": evals[-1].accuracy_majority,
        "final_accuracy_any": evals[-1].accuracy_any,
        "easy_fractions": [m.easy_fraction for m in result.metrics if m.phase == "route"],
        "cost": cost_accounting(result.state),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _route_records(params, problems, m, rho, temperature, seed, max_len):
    reports = []
    for p in problems:
        g = sample_completions(params, p.prompt, m, temperature, max_len, derive_seed(seed, _ROUTE, 0, p.id), p.id)
        reports.append(ConsensusReport.from_group(g))
    part = partition(reports, rho, 0)
    records = [
        {"prompt_id": r.prompt_id, "c": r.c, "a_maj": render_answer(r.a_maj), "route": part.route_of(r.prompt_id)}
        for r in reports
    ]
    return records, part


def cmd_route(args) -> int:
    params, problems = _load_inputs(args)
    cfg = load_config(args.config).curriculum if args.config else CurriculumConfig()
    m = args.m or cfg.m_consensus
    rho = cfg.rho if args.rho is None else args.rho
    records, part = _route_records(params, problems, m, rho, cfg.consensus_temperature, args.seed or 0, cfg.max_len)
    fh = _writer(args.out)
    try:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    easy = part.easy_fraction
    print(f"easy (SFT) fraction: {easy!r}\nhard (RL) fraction: {1.0 - easy if records else 0.0!r}", file=sys.stderr)
    return 0


def cmd_reward(args) -> int:
    params, problems = _load_inputs(args)
    cfg = load_config(args.config).curriculum if args.config else CurriculumConfig()
    base = cfg.reward
    rcfg = RewardConfig.ablation(args.ablation, base.alpha, base.beta, base.epsilon)
    rcfg = dataclasses.replace(rcfg, leave_one_out=base.leave_one_out)
    n = args.n or cfg.n_rl_completions
    seed = args.seed or 0
    fh = _writer(args.out)
    try:
        for p in problems:
            g = sample_completions(params, p.prompt, n, cfg.temperature, cfg.max_len, derive_seed(seed, _RL, 0, p.id), p.id)
            for b in composite_reward(g, ConsensusReport.from_group(g), rcfg, p.prompt, vocab=params.vocab):
                rec = {"prompt_id": p.id, "index": b.completion_index, "gate": b.gate,
                       "jsd_nov": b.jsd_nov, "g_rel": b.g_rel, "total": b.total}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_eval(args) -> int:
    params, problems = _load_inputs(args)
    cfg = load_config(args.config).curriculum if args.config else CurriculumConfig()
    rec = eval_accuracy(params, problems, args.m or cfg.eval_m, cfg.eval_temperature, args.seed or 0, cfg.max_len)
    text = rec.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def plot_rows(records: list[dict], kind: str) -> list[tuple]:
    """Tidy (step, series, value) rows for one plot kind."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    rows = []
    for rec in records:
        step, phase = rec["step"], rec["phase"]
        if kind == "accuracy_curve" and phase == "eval":
            rows += [(step, s, rec[s]) for s in ("accuracy_majority", "accuracy_any") if s in rec]
        elif kind == "difficulty_curves":
            prefix = {"eval": "accuracy_depth_", "route": "easy_fraction_depth_"}.get(phase)
            if prefix:
                rows += [(step, prefix + d, v) for d, v in sorted(rec.get("by_depth", {}).items())]
        elif kind == "cost" and "tokens" in rec:
            tok = rec["tokens"]
            rows += [(step, s, tok[s]) for s in sorted(tok)]
            base = tok.get("counterfactual_rl_tokens", 0)
            spent = tok.get("sft_tokens", 0) + tok.get("rl_tokens", 0)
            rows.append((step, "cost_ratio_vs_rl_only", spent / base if base else 1.0))
    return rows


def cmd_plotdata(args) -> int:
    if args.kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {args.kind!r}; choose from {', '.join(PLOT_KINDS)}")
    path = Path(args.metrics)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    records = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: bad metrics record: {exc.msg}") from None
    fh = _writer(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "series", "value"])
        for step, series, value in plot_rows(records, args.kind):
            w.writerow([step, series, repr(value)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_dataset(args) -> int:
    problems = gen_dataset(args.seed or 0, args.count, (args.depth_min, args.depth_max), args.modulus)
    save_dataset(problems, args.out)
    print(f"wrote {len(problems)} problems to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="disctt", description="Consensus-routed test-time self-curriculum on a toy task.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the curriculum (or an SFT-only / RL-only limit) from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--dataset", help="use this dataset instead of generating one")
    p.add_argument("--checkpoint", help="start from this policy instead of pretraining one")
    p.set_defaults(func=cmd_run)

    for name, func, hlp in (
        ("route", cmd_route, "write a partition snapshot for a checkpoint"),
        ("reward", cmd_reward, "dump per-completion reward terms"),
        ("eval", cmd_eval, "majority-vote and per-sample accuracy"),
    ):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--config")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--m", type=int, help="completions per problem")
        if name == "route":
            p.add_argument("--rho", type=float)
        if name == "reward":
            p.add_argument("--n", type=int, help="completions per problem")
            p.add_argument("--ablation", choices=("gate", "novelty", "full"), default="full")
        p.set_defaults(func=func)

    p = sub.add_parser("plotdata", help="export tidy CSV for plotting")
    p.add_argument("metrics")
    p.add_argument("--kind", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("dataset", help="generate a synthetic problem set")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--depth-min", type=int, default=2)
    p.add_argument("--depth-max", type=int, default=4)
    p.add_argument("--modulus", type=int, default=11)
    p.set_defaults(func=cmd_dataset)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
