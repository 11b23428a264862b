"""Evaluation reports, threshold sweeps and ablation grids.

Examples are decoded one at a time. Corpus TPF is the ratio of summed
generated tokens to summed forward passes; the mean of per-example ratios is
reported alongside it.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .decoding import DecodeConfig, DecodeTrace, generate
from .tasks import score_response
from .vocab import Example, Vocabulary

THRESHOLDS = (0.95, 0.5, 0.0)
CURVE_COLUMNS = ("threshold", "tpf", "accuracy", "tps")


def hardware_note() -> str:
    return f"{platform.machine()} {platform.system()} python {platform.python_version()}"


@dataclass
class EvalReport:
    decoder: str
    tau_dec: float
    tau_acc: float
    tpf: float
    tpf_mean: float
    tps: float | None
    accuracy: float
    n_examples: int
    generated_tokens: int
    forward_passes: int
    causes: dict = field(default_factory=dict)
    hardware: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def table(self) -> str:
        tps = "n/a" if self.tps is None else f"{self.tps:.1f}"
        rows = [("decoder", self.decoder), ("tau_dec", f"{self.tau_dec:g}"), ("tau_acc", f"{self.tau_acc:g}"),
                ("examples", str(self.n_examples)), ("accuracy", f"{self.accuracy:.3f}"),
                ("tpf", f"{self.tpf:.3f}"), ("tpf (mean)", f"{self.tpf_mean:.3f}"), ("tps", tps),
                ("causes", ", ".join(f"{k}={v}" for k, v in sorted(self.causes.items())) or "-")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def tpf_from_traces(traces: Sequence[DecodeTrace]) -> float:
    fwd = sum(t.forward_passes for t in traces)
    return sum(t.generated_tokens for t in traces) / fwd if fwd else 0.0


def evaluate(model, vocab: Vocabulary, examples: Sequence[Example], cfg: DecodeConfig,
             config: dict | None = None, timing: bool = True) -> tuple[EvalReport, list[DecodeTrace]]:
    """Decode each example on its own and aggregate accuracy and throughput.

    With ``timing=False`` the report carries no TPS so that it is reproducible
    byte for byte.
    """
    if not examples:
        raise ValueError("need at least one example")
    model.eval()
    traces, correct, wall = [], 0, 0.0
    for ex in examples:
        gen = generate(model, ex.prompt, cfg, vocab.eos_id, vocab.pad_id)
        correct += score_response(ex, gen.tokens, vocab)
        wall += gen.trace.wall_time
        traces.append(gen.trace)
    tokens = sum(t.generated_tokens for t in traces)
    fwd = sum(t.forward_passes for t in traces)
    causes: dict[str, int] = {}
    for t in traces:
        for k, v in t.causes().items():
            causes[k] = causes.get(k, 0) + v
    ratios = [t.generated_tokens / t.forward_passes for t in traces if t.forward_passes]
    report = EvalReport(
        decoder=cfg.decoder, tau_dec=cfg.tau_dec, tau_acc=cfg.tau_acc,
        tpf=tpf_from_traces(traces),
        tpf_mean=math.fsum(ratios) / len(ratios) if ratios else 0.0,
        tps=(tokens / wall if wall > 0 else None) if timing else None,
        accuracy=correct / len(examples), n_examples=len(examples),
        generated_tokens=tokens, forward_passes=fwd, causes=dict(sorted(causes.items())),
        hardware=hardware_note() if timing else "",
        config={"decode": cfg.to_dict(), **(config or {})},
    )
    return report, traces


def sweep(model, vocab: Vocabulary, examples: Sequence[Example], cfg: DecodeConfig,
          thresholds: Sequence[float], config: dict | None = None, timing: bool = True) -> list[EvalReport]:
    """One report per threshold, highest threshold first."""
    if len(thresholds) < 2:
        raise ValueError("a sweep needs at least two thresholds")
    reports = []
    for tau in sorted((float(t) for t in thresholds), reverse=True):
        reports.append(evaluate(model, vocab, examples, replace(cfg, tau_dec=tau), config, timing)[0])
    return reports


def _cell(v) -> str:
    if v is None:
        return "n/a"
    return repr(float(v)) if isinstance(v, float) else str(v)


def format_table(header: Sequence[str], rows: Sequence[Sequence], delimiter: str = "\t") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def curve_table(reports: Sequence[EvalReport], delimiter: str = "\t") -> str:
    rows = [(r.tau_dec, r.tpf, r.accuracy, r.tps) for r in reports]
    return format_table(CURVE_COLUMNS, rows, delimiter)


# -- ablations --------------------------------------------------------------

@dataclass(frozen=True)
class StrategyRow:
    on_policy: bool
    contiguous_prefix: bool
    hybrid_embedding: bool
    decoder: str


# Baseline checkpoint with one-way decoding, baseline with the full revising
# decoder, then the on-policy checkpoint under every prefix/hybrid toggle.
STRATEGY_ROWS = (
    StrategyRow(False, False, False, "threshold-baseline"),
    StrategyRow(False, True, True, "spd"),
    StrategyRow(True, False, False, "spd"),
    StrategyRow(True, True, False, "spd"),
    StrategyRow(True, False, True, "spd"),
    StrategyRow(True, True, True, "spd"),
)
CONVERGENCE_ROWS = (("consistency", True, False), ("confidence", False, True), ("both", True, True))


def strategy_config(row: StrategyRow, base: DecodeConfig, tau: float) -> DecodeConfig:
    common = dict(tau_dec=tau, tau_acc=base.tau_acc, block_size=base.block_size,
                  max_new_tokens=base.max_new_tokens, max_steps_per_block=base.max_steps_per_block,
                  rng_seed=base.rng_seed)
    if row.decoder == "threshold-baseline":
        return DecodeConfig(decoder=row.decoder, **common)
    return DecodeConfig(decoder=row.decoder, contiguous_prefix=row.contiguous_prefix,
                        hybrid_embedding=row.hybrid_embedding, convergence=base.convergence, **common)


@dataclass
class AblationResult:
    strategy: list[tuple[StrategyRow, list[EvalReport]]]
    convergence: list[tuple[str, EvalReport]]
    thresholds: tuple[float, ...]
    traces: list[list[DecodeTrace]] = field(default_factory=list)  # aligned with reports()

    def strategy_table(self, delimiter: str = "\t") -> str:
        header = ["on_policy", "contiguous_prefix", "hybrid_embedding", "decoder"]
        for tau in self.thresholds:
            header += [f"tpf@{tau:g}", f"accuracy@{tau:g}"]
        rows = []
        for row, reports in self.strategy:
            cells = [int(row.on_policy), int(row.contiguous_prefix), int(row.hybrid_embedding), row.decoder]
            for r in reports:
                cells += [r.tpf, r.accuracy]
            rows.append(cells)
        return format_table(header, rows, delimiter)

    def convergence_table(self, delimiter: str = "\t") -> str:
        rows = []
        for name, r in self.convergence:
            cons, conf = dict((n, (a, b)) for n, a, b in CONVERGENCE_ROWS)[name]
            causes = ";".join(f"{k}={v}" for k, v in sorted(r.causes.items()))
            rows.append([int(cons), int(conf), r.tpf, r.accuracy, causes])
        return format_table(["consistency", "confidence", "tpf", "accuracy", "causes"], rows, delimiter)

    def reports(self) -> list[EvalReport]:
        return [r for _, rs in self.strategy for r in rs] + [r for _, r in self.convergence]


def ablate(baseline, oput, vocab: Vocabulary, examples: Sequence[Example], base: DecodeConfig,
           thresholds: Sequence[float] = THRESHOLDS, convergence_tau: float = 0.5,
           config: dict | None = None, timing: bool = True) -> AblationResult:
    """Training-strategy x decoding-strategy grid plus the convergence-criterion rows.

    The convergence rows run the on-policy checkpoint with the full revising
    decoder at ``convergence_tau``.
    """
    thresholds = tuple(sorted((float(t) for t in thresholds), reverse=True))
    strategy, traces = [], []
    for row in STRATEGY_ROWS:
        model = oput if row.on_policy else baseline
        reports = []
        for tau in thresholds:
            report, tr = evaluate(model, vocab, examples, strategy_config(row, base, tau), config, timing)
            reports.append(report)
            traces.append(tr)
        strategy.append((row, reports))
    conv = []
    for name, _, _ in CONVERGENCE_ROWS:
        cfg = DecodeConfig(decoder="spd", tau_dec=convergence_tau, tau_acc=base.tau_acc,
                           block_size=base.block_size, max_new_tokens=base.max_new_tokens,
                           max_steps_per_block=base.max_steps_per_block, convergence=name,
                           rng_seed=base.rng_seed)
        report, tr = evaluate(oput, vocab, examples, cfg, config, timing)
        conv.append((name, report))
        traces.append(tr)
    return AblationResult(strategy, conv, thresholds, traces)
