"""Experiment driver: train the comparison variants, evaluate, sweep QP, write tables.

Everything a run produces lives under one output directory::

    <out>/seed<k>/<variant>/cnn.ckpt, sr.ckpt, manifest.json, train_log.csv
    <out>/seed<k>/results.csv, results.md, rd.csv, rd.md
    <out>/table_mean.md

Outputs depend only on the plan and the seeds, so repeating a run rewrites
every file byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, models
from .codec import DEFAULT_QP_GRID, rd_sweep
from .data import CorpusError, LabeledSequence, SyntheticSpec, gen_synthetic, load_avec_like, make_inputs, \
    split_sequences
from .imageops import check_factor
from .metrics import MetricsReport, concat_eval
from .nn import SGD, load_into, read_checkpoint, save_checkpoint
from .training import Budget, FinetuneConfig, ModelConfig, PretrainConfig, Recognizer, TrainVariant, train_variant

log = logging.getLogger(__name__)

OUTPUT_ENV = "LOWBIT_EMOTION_OUT"
CSV_COLUMNS = ("variant", "s", "qp", "bpp", "rmse", "cc", "ccc", "n")
TEST_SPLIT_SEED = 0  # the held-out sequences do not move with the training seed

# Narrow networks, float32 arithmetic and short schedules: the settings under
# which a full variant trains in a few minutes on one CPU core.
DESK_BUDGET = Budget(
    pretrain=PretrainConfig(iterations=2000, batch_size=16, patch=32),
    finetune=FinetuneConfig(batch_size=16, max_epochs=12),
    model=ModelConfig(widths=(8, 16, 32), init_std=0.05, dtype="float32"),
    val_fraction=0.15,
)
# Seconds-long plumbing check; the numbers it produces mean nothing.
SMOKE_BUDGET = Budget(
    pretrain=PretrainConfig(iterations=4, batch_size=4, patch=24),
    finetune=FinetuneConfig(batch_size=8, max_epochs=2),
    model=ModelConfig(widths=(3, 4, 5), hidden=6, init_std=0.05),
    val_fraction=0.25,
)
PROFILES = {"desk": DESK_BUDGET, "full": Budget(), "smoke": SMOKE_BUDGET}


class PlanError(ValueError):
    """The plan or the command line is inconsistent."""


class TrainingFailure(RuntimeError):
    """A variant failed to train; the message names the variant."""


def output_root(default: str | Path = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


# ---------------------------------------------------------------------------
# plan


@dataclass
class ExperimentPlan:
    corpus: dict = field(default_factory=lambda: {"synthetic": {}})  # {"synthetic": {...}} or {"path": dir}
    variants: list = field(default_factory=lambda: ["HR", "LR-8", "Joint-8", "Joint-OA"])
    s_eval: list = field(default_factory=lambda: [3, 4, 6, 8, 12, 16])
    qp_list: list = field(default_factory=lambda: list(DEFAULT_QP_GRID))
    seeds: list = field(default_factory=lambda: [0])
    budget_scale: float = 1.0
    profile: str = "desk"
    test_fraction: float = 0.2

    def __post_init__(self):
        if not self.variants:
            raise PlanError("plan lists no variants")
        try:
            parsed = [TrainVariant.parse(v) for v in self.variants]
            for s in self.s_eval:
                check_factor(int(s))
        except ValueError as exc:
            raise PlanError(str(exc)) from None
        names = [v.name for v in parsed]
        if len(set(names)) != len(names):
            raise PlanError("duplicate variant in plan")
        self.variants = names
        if not self.seeds:
            raise PlanError("plan lists no seeds")
        if not self.budget_scale > 0:
            raise PlanError("budget_scale must be positive")
        if self.profile not in PROFILES:
            raise PlanError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if not 0 < self.test_fraction < 1:
            raise PlanError("test_fraction must lie in (0, 1)")
        if set(self.corpus) - {"synthetic", "path"} or len(self.corpus) != 1:
            raise PlanError("corpus must be {'synthetic': {...}} or {'path': dir}")
        if any(q < 0 for q in self.qp_list):
            raise PlanError("qp values must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from None
        if not isinstance(d, dict):
            raise PlanError(f"{path}: plan must be a JSON object")
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def budget(self) -> Budget:
        b = PROFILES[self.profile]
        return replace(b, pretrain=b.pretrain.scaled(self.budget_scale), finetune=b.finetune.scaled(self.budget_scale))

    def load_corpus(self) -> list[LabeledSequence]:
        if "path" in self.corpus:
            return load_avec_like(self.corpus["path"])
        try:
            spec = SyntheticSpec(**self.corpus["synthetic"])
        except TypeError as exc:
            raise PlanError(f"bad synthetic corpus settings: {exc}") from None
        return gen_synthetic(spec)

    def split(self, seqs: list[LabeledSequence]):
        """(training corpus, test sequences); the training part is split again for validation."""
        if len(seqs) < 3:
            raise CorpusError("need at least three sequences to hold out a test split")
        rest, _, test = split_sequences(seqs, 0.0, self.test_fraction, TEST_SPLIT_SEED)
        return rest, test


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class ResultRow:
    variant: str
    s: int | None  # None: full-resolution input
    qp: int | None  # None: uncompressed
    bpp: float | None
    report: MetricsReport

    @property
    def key(self):
        return (self.variant, self.s, self.qp)


@dataclass
class ResultTable:
    seed: int
    rows: list = field(default_factory=list)

    def add(self, row: ResultRow) -> None:
        if any(r.key == row.key for r in self.rows):
            raise ValueError(f"duplicate result row {row.key}")
        if abs(row.report.ccc) > abs(row.report.cc) + 1e-12:
            raise ValueError(f"{row.key}: |CCC| exceeds |CC|")
        self.rows.append(row)

    def get(self, variant: str, s: int | None, qp: int | None = None) -> ResultRow:
        for r in self.rows:
            if r.key == (variant, s, qp):
                return r
        raise KeyError((variant, s, qp))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# lowbit_emotion {__version__} seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            m = r.report
            w.writerow([r.variant, "" if r.s is None else r.s, "" if r.qp is None else r.qp,
                        "" if r.bpp is None else f"{r.bpp:.6f}", f"{m.rmse:.6f}", f"{m.cc:.6f}", f"{m.ccc:.6f}", m.n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("results CSV lacks its provenance comment")
        seed = int(lines[0].rsplit("seed=", 1)[1])
        reader = csv.DictReader(lines[1:])
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        t = cls(seed)

        def opt(v, f):
            return None if v == "" else f(v)

        for d in reader:
            rep = MetricsReport(float(d["rmse"]), float(d["cc"]), float(d["ccc"]), int(d["n"]))
            t.rows.append(ResultRow(d["variant"], opt(d["s"], int), opt(d["qp"], int), opt(d["bpp"], float), rep))
        return t


# ---------------------------------------------------------------------------
# checkpoints


def _variant_dir(root: Path, seed: int, variant: str) -> Path:
    return root / f"seed{seed}" / variant


def save_variant(result, root: Path, seed: int, budget: Budget) -> Path:
    d = _variant_dir(root, seed, result.variant.name)
    d.mkdir(parents=True, exist_ok=True)
    header = {"variant": result.variant.name, "seed": seed}
    save_checkpoint(d / "cnn.ckpt", result.recognizer.cnn, header)
    files = ["cnn.ckpt"]
    if result.sr is not None:
        save_checkpoint(d / "sr.ckpt", result.sr, header)
        files.append("sr.ckpt")
    (d / "train_log.csv").write_text(
        f"# lowbit_emotion {__version__} seed={seed}\n" + "\n".join(result.history.csv_lines()) + "\n")
    manifest = {
        "variant": result.variant.name,
        "code_version": __version__,
        "provenance": result.provenance,
        "sr_in_inference": result.recognizer.sr is not None,
        "files": files,
        "model": asdict(budget.model),
        "history": {"best_epoch": result.history.best_epoch, "lr_drops": result.history.drops,
                    "optimizer_steps": result.history.steps, "epochs": len(result.history.rows)},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_recognizer(root: Path, seed: int, variant: str) -> Recognizer:
    d = _variant_dir(root, seed, variant)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint for {variant} (seed {seed}) under {d}")
    manifest = json.loads(mpath.read_text())
    mc = manifest["model"]
    dtype = np.dtype(mc["dtype"])
    widths = tuple(mc["widths"])
    cnn = models.build_emocnn(0, widths, mc["hidden"], dtype=dtype, init_std=mc["init_std"])
    load_into(cnn, read_checkpoint(d / "cnn.ckpt")[1])
    sr = None
    if manifest["sr_in_inference"]:
        sr = models.build_srfcn(0, widths, mc["sr_residual"], dtype, mc["init_std"])
        load_into(sr, read_checkpoint(d / "sr.ckpt")[1])
    return Recognizer(cnn, sr)


# ---------------------------------------------------------------------------
# operations


def eval_points(variant: str, s_eval) -> list[int | None]:
    """Factors at which a variant is scored: its own, all of ``s_eval`` for Joint-OA, none for HR."""
    v = TrainVariant.parse(variant)
    if v.tag == "HR":
        return [None]
    if v.tag == "Joint-OA":
        return sorted({int(s) for s in s_eval})
    return [v.s]


def evaluate_recognizer(rec: Recognizer, test: list[LabeledSequence], s: int | None) -> MetricsReport:
    pairs = []
    dtype = rec.cnn.params()[0].weights.dtype
    for q in test:
        x, _ = make_inputs(q.frames, s)
        pairs.append((rec.predict(x.astype(dtype)), q.valence))
    return concat_eval(pairs, degenerate_ok=True)


def train_plan(plan: ExperimentPlan, root: Path, seeds=None, variants=None) -> None:
    """Train and checkpoint every (seed, variant) of the plan."""
    corpus, _ = plan.split(plan.load_corpus())
    budget = plan.budget()
    for seed in seeds if seeds is not None else plan.seeds:
        for v in variants if variants is not None else plan.variants:
            log.info("training %s seed %d", v, seed)
            try:
                result = train_variant(v, corpus, budget, int(seed))
            except (ValueError, FloatingPointError, ArithmeticError) as exc:
                raise TrainingFailure(f"variant {v} (seed {seed}) failed: {exc}") from exc
            save_variant(result, root, int(seed), budget)


def eval_plan(plan: ExperimentPlan, root: Path, seeds=None) -> list[ResultTable]:
    """Score saved checkpoints on the test split; writes results.csv and table.md per seed."""
    _, test = plan.split(plan.load_corpus())
    tables = []
    for seed in seeds if seeds is not None else plan.seeds:
        table = ResultTable(int(seed))
        for v in plan.variants:
            rec = load_recognizer(root, int(seed), v)
            for s in eval_points(v, plan.s_eval):
                table.add(ResultRow(v, s, None, None, evaluate_recognizer(rec, test, s)))
        report(table, root / f"seed{seed}", "results")
        tables.append(table)
    if tables:
        (root / "table_mean.md").write_text(markdown_grid(tables))
    return tables


def run_plan(plan: ExperimentPlan, root: Path | None = None) -> list[ResultTable]:
    """Train every variant for every seed, then evaluate; one table per seed."""
    root = Path(root) if root is not None else output_root()
    root.mkdir(parents=True, exist_ok=True)
    (root / "plan.json").write_text(plan.to_json())
    train_plan(plan, root)
    return eval_plan(plan, root)


def run_rd(plan: ExperimentPlan, root: Path | None = None, seeds=None) -> list[ResultTable]:
    """QP sweep over saved checkpoints; the models are used as trained, never updated.

    Rows cover every non-HR variant at each of its evaluation factors: one
    uncompressed row plus one row per qp. The process-wide optimizer step
    counter is recorded before and after in ``rd_audit.json``.
    """
    root = Path(root) if root is not None else output_root()
    _, test = plan.split(plan.load_corpus())
    steps_before = SGD.total_steps
    tables = []
    for seed in seeds if seeds is not None else plan.seeds:
        table = ResultTable(int(seed))
        for v in plan.variants:
            if TrainVariant.parse(v).tag == "HR":
                continue
            rec = load_recognizer(root, int(seed), v)
            for s in eval_points(v, plan.s_eval):
                table.add(ResultRow(v, s, None, None, evaluate_recognizer(rec, test, s)))
                for pt in rd_sweep(test, s, plan.qp_list, rec):
                    rep = MetricsReport(pt.rmse, pt.cc, pt.ccc, pt.n)
                    table.add(ResultRow(v, s, pt.qp, pt.bpp, rep))
        report(table, root / f"seed{seed}", "rd")
        tables.append(table)
    steps = SGD.total_steps - steps_before
    (root / "rd_audit.json").write_text(json.dumps({"optimizer_steps": steps}, sort_keys=True) + "\n")
    if steps:
        raise RuntimeError(f"R-D sweep performed {steps} optimizer steps")
    return tables


def report(table: ResultTable, out_dir: Path, stem: str = "results", fmt: str = "both") -> list[Path]:
    """Write ``<stem>.csv`` and/or a Table-1-style ``<stem>.md``."""
    if not table.rows:
        raise ValueError("nothing to report: empty result table")
    if fmt not in ("csv", "markdown", "both"):
        raise ValueError(f"unknown report format {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        p = out_dir / f"{stem}.csv"
        p.write_text(table.to_csv())
        written.append(p)
    if fmt in ("markdown", "both"):
        p = out_dir / f"{stem}.md"
        p.write_text(markdown_grid([table]))
        written.append(p)
    return written


def _mean_metric(tables, variant, s, metric):
    vals = []
    for t in tables:
        try:
            vals.append(getattr(t.get(variant, s).report, metric))
        except KeyError:
            pass
    return float(np.mean(vals)) if vals else None


def markdown_grid(tables: list[ResultTable]) -> str:
    """Comparison grid on uncompressed inputs, averaged over the given tables.

    One column block per factor s holding LR-s, NonJoint-s, Joint-s and
    Joint-OA, with the HR reference repeated in front of every block; rows are
    RMSE, CC and CCC.
    """
    s_vals = sorted({r.s for t in tables for r in t.rows if r.s is not None and r.qp is None})
    seeds = ", ".join(str(t.seed) for t in tables)
    lines = [f"<!-- lowbit_emotion {__version__} seeds={seeds} -->", ""]
    for s in s_vals:
        cols = [("HR", None), (f"LR-{s}", s), (f"NonJoint-{s}", s), (f"Joint-{s}", s), ("Joint-OA", s)]
        lines.append(f"**s = {s}**")
        lines.append("")
        lines.append("| | " + " | ".join(c[0] for c in cols) + " |")
        lines.append("|---" * (len(cols) + 1) + "|")
        for metric in ("rmse", "cc", "ccc"):
            cells = []
            for name, ss in cols:
                v = _mean_metric(tables, name, ss, metric)
                cells.append("–" if v is None else f"{v:.3f}")
            lines.append(f"| {metric.upper()} | " + " | ".join(cells) + " |")
        lines.append("")
    if not s_vals:
        hr = [_mean_metric(tables, "HR", None, m) for m in ("rmse", "cc", "ccc")]
        lines.append("| | HR |\n|---|---|")
        for m, v in zip(("RMSE", "CC", "CCC"), hr):
            lines.append(f"| {m} | {'–' if v is None else f'{v:.3f}'} |")
        lines.append("")
    return "\n".join(lines)
