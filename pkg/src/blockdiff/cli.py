"""Command-line entry point: train, eval, sweep, ablate, distill, generate.

Every run is driven by one flat YAML file of ``key: value`` pairs; any key can
be overridden with a ``--key-name value`` flag. Exit codes: 0 on success, 1 for
usage or configuration errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import yaml

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .corruption import NoiseSpec
from .decoding import PRESETS, DecodeConfig, DecodeError, generate
from .harness import ablate, curve_table, evaluate, sweep
from .model import DiffusionTransformer, ModelConfig
from .tasks import (TaskSpec, example_record, generate_task_dataset, read_dataset, self_distill,
                    task_vocabulary)
from .training import NonFiniteLossError, TrainConfig, train, write_log
from .vocab import Example

log = logging.getLogger("blockdiff")

TASK_KEYS = ("family", "min_len", "max_len", "num_symbols", "modulus", "operators", "identity_prob")


@dataclass
class RunConfig:
    # task and data
    family: str = "modular-arithmetic"
    min_len: int = 4
    max_len: int = 8
    num_symbols: int = 10
    modulus: int = 7
    operators: str = "+-"
    identity_prob: float = 0.0
    task_seed: int = 0
    num_examples: int = 2000
    dataset: str | None = None
    # model
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    block_size: int = 32
    max_seq_len: int | None = None
    positional: str = "rope"
    dtype: str = "float32"
    model_seed: int = 0
    init_checkpoint: str | None = None
    # training
    objective: str = "oput"
    epochs: int = 2
    max_steps: int | None = None
    batch_size: int = 8
    learning_rate: float = 3e-4
    lr_schedule: str = "cosine"
    warmup_steps: int = 0
    weight_decay: float = 0.0
    separate_iterations: bool = True
    rollout_sampling: str = "categorical"
    train_seed: int = 0
    noise_mode: str = "fixed"
    t_fixed: float = 0.75
    t_low: float = 0.2
    t_high: float = 0.9
    noise_seed: int = 0
    # decoding
    preset: str | None = None
    decoder: str = "spd"
    tau_dec: float = 0.5
    tau_acc: float = 0.9
    max_new_tokens: int | None = None
    max_steps_per_block: int | None = None
    contiguous_prefix: bool | None = None
    hybrid_embedding: bool | None = None
    convergence: str | None = None
    decode_seed: int = 0
    # evaluation
    n: int = 200
    eval_seed: int = 1000
    thresholds: list | None = None
    timing: bool = True
    delimiter: str = "\t"
    # files
    checkpoint: str | None = None
    baseline_checkpoint: str | None = None
    oput_checkpoint: str | None = None
    log: str | None = None
    out: str | None = None
    trace: str | None = None
    prompt: str | None = None
    budget: int | None = None

    def task_spec(self, seed: int | None = None) -> TaskSpec:
        kw = {k: getattr(self, k) for k in TASK_KEYS}
        return TaskSpec(rng_seed=self.task_seed if seed is None else seed, **kw)


class ConfigError(ValueError):
    pass


_HINTS = typing.get_type_hints(RunConfig)


def _base_types(name: str) -> tuple[type, bool]:
    hint = _HINTS[name]
    args = typing.get_args(hint)
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        base = [a for a in args if a is not type(None)][0]
        return (typing.get_origin(base) or base), True
    return (typing.get_origin(hint) or hint), False


def coerce(name: str, value):
    """Check one config value against the field type, allowing ints where floats are expected."""
    if name not in _HINTS:
        raise ConfigError(f"unknown config key {name!r}")
    base, optional = _base_types(name)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name}: a value is required")
    if base is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if base is list and isinstance(value, str):
        value = [yaml.safe_load(v) for v in value.split(",")]
    if base is str and isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    if base is int and isinstance(value, bool) or not isinstance(value, base):
        raise ConfigError(f"{name}: expected {base.__name__}, got {value!r}")
    return value


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: not valid YAML ({err})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected key: value pairs")
        values.update(loaded)
    values.update(overrides)
    resolved = {k: coerce(k, v) for k, v in values.items()}
    cfg = RunConfig(**resolved)
    if cfg.preset is not None:
        if cfg.preset not in PRESETS:
            raise ConfigError(f"preset: expected one of {sorted(PRESETS)}, got {cfg.preset!r}")
        if "tau_dec" not in resolved:
            cfg.tau_dec = PRESETS[cfg.preset]["tau_dec"]
    return cfg


def _checked(build, what: str):
    try:
        return build()
    except (ValueError, TypeError) as err:
        raise ConfigError(f"{what}: {err}") from None


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise ConfigError("missing required setting: " + ", ".join(missing))


# -- pieces -----------------------------------------------------------------

def train_config(cfg: RunConfig) -> TrainConfig:
    return _checked(lambda: TrainConfig(
        objective=cfg.objective, epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, lr_schedule=cfg.lr_schedule,
        separate_iterations=cfg.separate_iterations, rollout_sampling=cfg.rollout_sampling,
        rng_seed=cfg.train_seed, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps), "training")


def noise_spec(cfg: RunConfig) -> NoiseSpec:
    return _checked(lambda: NoiseSpec(mode=cfg.noise_mode, t_fixed=cfg.t_fixed, t_low=cfg.t_low,
                                      t_high=cfg.t_high, rng_seed=cfg.noise_seed), "noise")


def decode_config(cfg: RunConfig, block_size: int, max_new: int) -> DecodeConfig:
    return _checked(lambda: DecodeConfig(
        decoder=cfg.decoder, tau_dec=cfg.tau_dec, tau_acc=cfg.tau_acc, block_size=block_size,
        max_new_tokens=cfg.max_new_tokens or max_new, max_steps_per_block=cfg.max_steps_per_block,
        contiguous_prefix=cfg.contiguous_prefix, hybrid_embedding=cfg.hybrid_embedding,
        convergence=cfg.convergence, rng_seed=cfg.decode_seed), "decoding")


def _sequence_need(examples, eos_id: int, block_size: int) -> int:
    return max(len(e.prompt) + len(e.target(eos_id, block_size)) for e in examples)


def training_data(cfg: RunConfig, vocab) -> list[Example]:
    if cfg.dataset:
        try:
            return read_dataset(cfg.dataset)
        except OSError as err:
            raise ConfigError(f"dataset: cannot read {cfg.dataset}: {err.strerror}") from None
    spec = _checked(cfg.task_spec, "task")
    return generate_task_dataset(spec, cfg.num_examples)


def eval_examples(cfg: RunConfig) -> list[Example]:
    spec = _checked(lambda: cfg.task_spec(cfg.eval_seed), "task")
    return generate_task_dataset(spec, cfg.n)


def _task_from_checkpoint(cfg: RunConfig, path: str, explicit: set) -> None:
    """Fill task keys recorded at training time unless set explicitly."""
    try:
        meta = read_header(path).get("meta", {})
    except OSError as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err.strerror}") from None
    for k, v in meta.get("task", {}).items():
        if k in TASK_KEYS and k not in explicit:
            setattr(cfg, k, v)


def _load(path: str, cfg: RunConfig | None = None):
    try:
        model, vocab, header = load_checkpoint(path)
    except OSError as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err.strerror}") from None
    if cfg is not None:
        cfg.block_size = model.config.block_size
    return model, vocab, header


def _max_new(model, examples) -> int:
    return model.config.max_seq_len - max(len(e.prompt) for e in examples)


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")


# -- commands ---------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint")
    tcfg, noise = train_config(cfg), noise_spec(cfg)
    if cfg.init_checkpoint:
        model, vocab, _ = _load(cfg.init_checkpoint)
        data = training_data(cfg, vocab)
    else:
        vocab = task_vocabulary(_checked(cfg.task_spec, "task"))
        data = training_data(cfg, vocab)
        need = _sequence_need(data, vocab.eos_id, cfg.block_size)
        mcfg = _checked(lambda: ModelConfig(
            vocab_size=len(vocab), embed_dim=cfg.embed_dim, num_layers=cfg.num_layers,
            num_heads=cfg.num_heads, max_seq_len=cfg.max_seq_len or need, block_size=cfg.block_size,
            rng_seed=cfg.model_seed, positional=cfg.positional, dtype=cfg.dtype), "model")
        model = DiffusionTransformer(mcfg, vocab.mask_id)
    torch.manual_seed(cfg.train_seed)
    result = train(model, vocab, data, tcfg, noise, max_steps=cfg.max_steps)
    meta = {"task": {k: getattr(cfg, k) for k in TASK_KEYS}, "train": tcfg.to_dict(),
            "noise": asdict(noise), "steps": result.steps, "skipped": result.skipped}
    save_checkpoint(cfg.checkpoint, model, vocab, meta)
    if cfg.log:
        write_log(result.log, cfg.log)
    last = {}
    for rec in result.log:
        last[rec["phase"]] = rec["loss"]
    print(f"trained {result.steps} steps ({len(result.log)} updates, {result.skipped} skipped); final losses: "
          + ", ".join(f"{k}={v:.4f}" for k, v in last.items()))
    print(f"checkpoint written to {cfg.checkpoint}")
    return 0


def _write_traces(path: str | None, traces, timing: bool, **tags) -> None:
    if not path:
        return
    with open(path, "a", encoding="utf-8") as f:
        for i, t in enumerate(traces):
            for r in t.to_records():
                if not timing:
                    r.pop("wall_time", None)
                f.write(json.dumps({**tags, "example": i, **r}, sort_keys=True) + "\n")


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint")
    model, vocab, _ = _load(cfg.checkpoint, cfg)
    examples = eval_examples(cfg)
    dcfg = decode_config(cfg, model.config.block_size, _max_new(model, examples))
    report, traces = evaluate(model, vocab, examples, dcfg, {"run": asdict(cfg)}, timing=cfg.timing)
    print(report.table())
    _write(cfg.out, report.to_json() + "\n")
    _write(cfg.trace, "")
    _write_traces(cfg.trace, traces, cfg.timing)
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "thresholds")
    if len(cfg.thresholds) < 2:
        raise ConfigError("thresholds: a sweep needs at least two values")
    taus = [coerce("tau_dec", t) for t in cfg.thresholds]
    model, vocab, _ = _load(cfg.checkpoint, cfg)
    examples = eval_examples(cfg)
    dcfg = decode_config(cfg, model.config.block_size, _max_new(model, examples))
    reports = sweep(model, vocab, examples, dcfg, taus, {"run": asdict(cfg)}, timing=cfg.timing)
    table = curve_table(reports, cfg.delimiter)
    print(table, end="")
    _write(cfg.out, table)
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    _require(cfg, "baseline_checkpoint", "oput_checkpoint")
    base_model, vocab, _ = _load(cfg.baseline_checkpoint)
    oput_model, vocab2, _ = _load(cfg.oput_checkpoint, cfg)
    if vocab != vocab2:
        raise ConfigError("baseline and on-policy checkpoints use different vocabularies")
    examples = eval_examples(cfg)
    dcfg = decode_config(cfg, oput_model.config.block_size, _max_new(oput_model, examples))
    result = ablate(base_model, oput_model, vocab, examples, dcfg,
                    thresholds=cfg.thresholds or (0.95, 0.5, 0.0), config={"run": asdict(cfg)},
                    timing=cfg.timing)
    strat, conv = result.strategy_table(cfg.delimiter), result.convergence_table(cfg.delimiter)
    print(strat + "\n" + conv, end="")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "strategy.tsv").write_text(strat, encoding="utf-8")
        (out / "convergence.tsv").write_text(conv, encoding="utf-8")
        (out / "reports.jsonl").write_text("".join(r.to_json() + "\n" for r in result.reports()),
                                           encoding="utf-8")
    # one trace stream for the whole grid; "report" indexes lines of reports.jsonl
    _write(cfg.trace, "")
    for i, traces in enumerate(result.traces):
        _write_traces(cfg.trace, traces, cfg.timing, report=i)
    return 0


def cmd_distill(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "out")
    model, vocab, _ = _load(cfg.checkpoint, cfg)
    prompts = [e.prompt for e in eval_examples(cfg)]
    budget = cfg.budget or _max_new(model, eval_examples(cfg))
    kept, stats = self_distill(model, vocab, prompts, budget, block_size=model.config.block_size)
    _write(cfg.out, "".join(example_record(d.as_example(), d.metadata) + "\n" for d in kept))
    print(f"kept {stats.kept}, discarded {stats.discarded}; written to {cfg.out}")
    return 0


def cmd_generate(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "prompt")
    model, vocab, _ = _load(cfg.checkpoint, cfg)
    try:
        prompt = vocab.encode(cfg.prompt.split())
    except KeyError as err:
        raise ConfigError(f"prompt: unknown symbol {err}") from None
    dcfg = decode_config(cfg, model.config.block_size, model.config.max_seq_len - len(prompt))
    gen = generate(model, prompt, dcfg, vocab.eos_id, vocab.pad_id)
    for r in gen.trace.to_records():
        if not cfg.timing:
            r.pop("wall_time", None)
        print(json.dumps(r, sort_keys=True))
    print("response:", " ".join(vocab.decode(gen.response)))
    if cfg.trace:
        gen.trace.write(cfg.trace, include_wall_time=cfg.timing)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate,
            "distill": cmd_distill, "generate": cmd_generate}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file of key: value settings")
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS,
                           metavar="VALUE")
    return parser


def _parse_flag(value: str):
    # flags arrive as strings; read them the way YAML would
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command, path, verbose = args.pop("command"), args.pop("config"), args.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: _parse_flag(v) for k, v in args.items()}
    if "thresholds" in overrides and isinstance(overrides["thresholds"], (int, float)):
        overrides["thresholds"] = [overrides["thresholds"]]
    try:
        cfg = load_config(path, overrides)
        for key in ("checkpoint", "oput_checkpoint"):
            if command in ("eval", "sweep", "ablate", "distill") and getattr(cfg, key):
                explicit = set(overrides)
                if path:
                    explicit |= set(yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})
                _task_from_checkpoint(cfg, getattr(cfg, key), explicit)
                break
        return COMMANDS[command](cfg)
    except ConfigError as err:
        print(f"blockdiff {command}: configuration error: {err}", file=sys.stderr)
        return 1
    except (DecodeError, NonFiniteLossError, OSError, RuntimeError) as err:
        print(f"blockdiff {command}: failed: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
