"""Named desk-scale experiments.

A preset is plain data: which corpus splits to build, which arms to train,
which config overrides each arm uses, and which arm pairs to compare.  The
runner trains every (arm, seed) job, evaluates on the test split and
writes CSV reports plus a provenance record.
"""
from __future__ import annotations

import csv
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ContractError
from .data.augment import AugmentationConfig
from .data.idx import load_idx
from .data.labels import (DIGITS, AssembledDataset, LabelSchema, SourceDataset, assemble,
                          content_hash, make_partial)
from .data.synth import synthesize_subset
from .data.variants import derive_variant, fraction_indices
from .evaluation import (ClassMetrics, auc, evaluate, metrics_csv_rows, novelty_from_answers,
                         two_sample_t_test, write_metrics_csv)
from .model import ModelConfig, init_model, predict
from .training import TrainConfig, fit

ODD = ("1", "3", "5", "7", "9")
EVEN = ("0", "2", "4", "6", "8")
OVERLAP_D0 = ("1", "2", "3", "4", "5")
OVERLAP_D1 = ("3", "4", "5", "6", "7")
SEVEN = tuple(str(d) for d in range(1, 8))

FULL = {}
# Training sets of a few hundred images converge far slower per epoch than a
# full corpus; let early stopping, not the epoch cap, end these runs.
SMALL_DATA = {"batch_size": 16, "max_epochs": 300}
PLAIN = {"disable_adapter": True, "disable_pseudo": True, "disable_consist": True}


@dataclass(frozen=True)
class Arm:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    recipe: dict
    arms: tuple[Arm, ...]
    comparisons: tuple[tuple[str, str, str], ...]  # (metric, arm_a, arm_b): is a > b?
    overrides: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0, 1, 2)
    description: str = ""


PRESETS: dict[str, ExperimentPreset] = {p.name: p for p in [
    ExperimentPreset(
        "mnist-zero",
        {"kind": "zero", "train": 5000, "valid": 1000, "test": 2000},
        (Arm("zero-vs-others"), Arm("10-way")),
        (("auc_0", "10-way", "zero-vs-others"),),
        description="binary 'zero vs others' labels against 10-way labels on the same "
                    "images; metric is the test AUC of class 0",
    ),
    ExperimentPreset(
        "odd-even-assembly",
        {"kind": "assembly", "d0": ODD, "d1": EVEN, "per_source": 300, "digits": None,
         "pool": 1000, "valid": 1000, "test": 2000},
        (Arm("D0-only"), Arm("D1-only"), Arm("assembled")),
        (("mauc_d0", "assembled", "D0-only"), ("mauc_d1", "assembled", "D1-only")),
        overrides=SMALL_DATA,
        description="odd-digit and even-digit sources of 300 images each, trained alone "
                    "and assembled",
    ),
    ExperimentPreset(
        "partial-overlap",
        {"kind": "assembly", "d0": OVERLAP_D0, "d1": OVERLAP_D1, "per_source": 300,
         "digits": SEVEN, "pool": 1000, "valid": 700, "test": 1400},
        (Arm("base", PLAIN),
         Arm("+pseudo", {"disable_adapter": True, "disable_consist": True}),
         Arm("+consist", {"disable_adapter": True, "disable_pseudo": True}),
         Arm("+both", {"disable_adapter": True}),
         Arm("+adapter+both", FULL),
         Arm("full-label", PLAIN)),
        (("mauc", "+adapter+both", "base"), ("mauc", "full-label", "+adapter+both")),
        overrides=SMALL_DATA,
        description="sources labeled {1..5} and {3..7}; loss/adapter ablation against a "
                    "fully labeled upper bound",
    ),
    ExperimentPreset(
        "sharpen-ablation",
        {"kind": "assembly", "d0": OVERLAP_D0, "d1": OVERLAP_D1, "per_source": 300,
         "digits": SEVEN, "pool": 1000, "valid": 700, "test": 1400},
        tuple(Arm(f"t={t:g}", {"sharpen_t": t}) for t in (1.0, 2.0, 4.0, 8.0)),
        (("mauc", "t=4", "t=1"), ("mauc", "t=4", "t=8")),
        overrides=SMALL_DATA,
        description="sharpen temperature grid on the partial-overlap assembly",
    ),
    ExperimentPreset(
        "novel-attack",
        {"kind": "novel", "novel_class": "0", "fraction": 0.01, "train": 60000,
         "valid": 1000, "test": 2000},
        (Arm("adapter", {"novelty": "adapter-query"}),
         Arm("no-adapter", {"disable_adapter": True, "novelty": "max-complement"})),
        (("novelty_auc", "adapter", "no-adapter"),),
        overrides=SMALL_DATA,
        description="class 0 never seen in training; AUC of the novelty score for "
                    "detecting 0s in the test split",
    ),
    ExperimentPreset(
        "multi-label",
        {"kind": "multi", "train": 3000, "valid": 600, "test": 2000},
        (Arm("adapter"), Arm("no-adapter", {"disable_adapter": True})),
        (("mauc", "adapter", "no-adapter"),),
        description="train on single half-width digits, test on two-digit images",
    ),
]}


# ----------------------------------------------------------------- corpora

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
SYNTH_SEED = 20220301
STREAMS = {"train": 0, "valid": 1, "test": 2}


@functools.lru_cache(maxsize=16)
def _synthetic(split: str, count: int) -> SourceDataset:
    return synthesize_subset(np.arange(count), SYNTH_SEED, split, STREAMS[split])


@functools.lru_cache(maxsize=4)
def _mnist(idx_dir: str, split: str) -> SourceDataset:
    images, labels = (Path(idx_dir) / f for f in MNIST_FILES[split])
    return load_idx(images, labels, name=split)


def corpus_split(split: str, count: int, idx_dir: str | None = None,
                 indices: np.ndarray | None = None) -> SourceDataset:
    """The first ``count`` images of a split (or ``indices`` of it).

    With real MNIST the validation split is carved from the end of the
    training file.
    """
    if idx_dir is None:
        if indices is not None:
            return synthesize_subset(indices, SYNTH_SEED, split, STREAMS[split])
        return _synthetic(split, count)
    if split == "test":
        full = _mnist(idx_dir, "test")
    else:
        train = _mnist(idx_dir, "train")
        cut = len(train) - 5000
        full = train.take(np.arange(cut), "train") if split == "train" else \
            train.take(np.arange(cut, len(train)), "valid")
    if indices is None:
        indices = np.arange(min(count, len(full)))
    return full.take(indices)


def _digits_only(d: SourceDataset, digits) -> SourceDataset:
    if digits is None:
        return d
    cols = DIGITS.indices(digits)
    keep = np.flatnonzero((d.states[:, cols] == 1).any(axis=1))
    return d.take(keep)


@dataclass
class Job:
    preset: str
    arm: str
    seed: int
    train: AssembledDataset
    valid: AssembledDataset
    test: AssembledDataset
    config: TrainConfig
    model_config: ModelConfig
    extras: dict


def _config(base: TrainConfig, overrides: dict, seed: int) -> tuple[TrainConfig, dict]:
    extras = {}
    fields = {}
    for k, v in overrides.items():
        if k == "sharpen_t":
            fields["sharpen"] = replace(fields.get("sharpen", base.sharpen), t=float(v))
        elif k == "sharpen_tau":
            fields["sharpen"] = replace(fields.get("sharpen", base.sharpen), tau=float(v))
        elif k in AugmentationConfig.__dataclass_fields__ and k != "seed":
            fields["augment"] = replace(fields.get("augment", base.augment), **{k: v})
        elif k in TrainConfig.__dataclass_fields__:
            fields[k] = v
        else:
            extras[k] = v
    return replace(base, seed=seed, **fields), extras


def build_jobs(preset: ExperimentPreset, seeds, base: TrainConfig,
               idx_dir: str | None = None, model_config: ModelConfig | None = None,
               force: dict | None = None) -> list[Job]:
    """Expand a preset into one job per (seed, arm).

    Config precedence, lowest first: ``base``, preset overrides, ``force``
    (explicit user settings), arm overrides (what makes an arm an arm).
    """
    model_config = model_config or ModelConfig()
    force = force or {}
    r = preset.recipe
    kind = r["kind"]
    jobs = []
    for seed in seeds:
        splits = _splits(kind, r, seed, idx_dir)
        for arm in preset.arms:
            cfg, extras = _config(base, {**preset.overrides, **force, **arm.overrides}, seed)
            train, valid, test = splits[arm.name] if arm.name in splits else splits["*"]
            jobs.append(Job(preset.name, arm.name, seed, train, valid, test, cfg, model_config,
                            {**extras, **r}))
    return jobs


def _splits(kind: str, r: dict, seed: int, idx_dir: str | None) -> dict:
    if kind == "zero":
        train = corpus_split("train", r["train"], idx_dir)
        valid = corpus_split("valid", r["valid"], idx_dir)
        test = corpus_split("test", r["test"], idx_dir)
        ztrain, ztest = derive_variant(train, "zero", test=test)
        zvalid, _ = derive_variant(valid, "zero", test=valid)
        return {"zero-vs-others": tuple(assemble([d]) for d in (ztrain, zvalid, ztest)),
                "10-way": tuple(assemble([d]) for d in (train, valid, test))}

    if kind == "assembly":
        digits = r["digits"]
        pool = _digits_only(corpus_split("train", r["pool"], idx_dir), digits)
        valid = _digits_only(corpus_split("valid", r["valid"], idx_dir), digits)
        test = _digits_only(corpus_split("test", r["test"], idx_dir), digits)
        n = r["per_source"]
        if len(pool) < 2 * n:
            raise ContractError(f"pool of {len(pool)} images cannot supply two sources of {n}")
        order = np.random.default_rng([seed, 0xA55E]).permutation(len(pool))
        first, second = pool.take(order[:n]), pool.take(order[n:2 * n])
        d0 = make_partial(first, r["d0"], name="D0")
        d1 = make_partial(second, r["d1"], name="D1")
        union = LabelSchema.canonical(set(r["d0"]) | set(r["d1"]))
        full_valid = assemble([make_partial(valid, union, name="valid")])
        full_test = assemble([make_partial(test, union, name="test")])
        both = assemble([d0, d1])
        full = assemble([make_partial(pool.take(order[:2 * n]), union, name="D0+D1")])
        out = {"*": (both, full_valid, full_test),
               "full-label": (full, full_valid, full_test)}
        for arm, src, cls in (("D0-only", d0, r["d0"]), ("D1-only", d1, r["d1"])):
            out[arm] = (assemble([src]), full_valid.restricted(cls), full_test.restricted(cls))
        return out

    if kind == "novel":
        test = corpus_split("test", r["test"], idx_dir)
        if idx_dir is None:
            # render only the sampled fraction of a nominal full-size training split
            idx = fraction_indices(r["train"], r["fraction"], seed)
            train = corpus_split("train", len(idx), None, indices=idx)
            train, test = derive_variant(train, "novel", test=test, novel_class=r["novel_class"])
        else:
            full = corpus_split("train", 10**9, idx_dir)
            train, test = derive_variant(full, "novel", test=test, novel_class=r["novel_class"],
                                         fraction=r["fraction"], seed=seed)
        valid, _ = derive_variant(corpus_split("valid", r["valid"], idx_dir), "novel",
                                  test=test, novel_class=r["novel_class"])
        return {"*": tuple(assemble([d]) for d in (train, valid, test))}

    if kind == "multi":
        train = corpus_split("train", r["train"], idx_dir)
        test = corpus_split("test", r["test"], idx_dir)
        valid = corpus_split("valid", r["valid"], idx_dir)
        mtrain, mtest = derive_variant(train, "multi", test=test, seed=seed)
        mvalid, _ = derive_variant(valid, "multi", test=valid, seed=seed)
        return {"*": tuple(assemble([d]) for d in (mtrain, mvalid, mtest))}

    raise ContractError(f"unknown recipe kind {kind!r}")


# ----------------------------------------------------------------- running


@dataclass
class JobResult:
    arm: str
    seed: int
    metrics: ClassMetrics
    scalars: dict[str, float]
    epochs: int
    best_epoch: int
    metrics_csv: str


def run_job(job: Job) -> JobResult:
    state = init_model(job.train.schema, job.model_config, seed=job.seed)
    run = fit(state, job.train, job.valid, job.config)
    metrics = evaluate(state, job.test)
    scalars = {"mauc": metrics.mauc}
    kind = job.extras.get("kind")
    if kind == "zero":
        scalars["auc_0"] = metrics.per_class["zero" if "zero" in metrics.per_class else "0"]
    elif kind == "assembly":
        scalars["mauc_d0"] = metrics.mean_over(job.extras["d0"])
        scalars["mauc_d1"] = metrics.mean_over(job.extras["d1"])
    elif kind == "novel":
        novel = job.extras["novel_class"]
        answers = predict(state, job.test.images)
        is_novel = job.test.states[:, job.test.schema.index(novel)] == 1
        for mode in ("adapter-query", "max-complement"):
            scores = novelty_from_answers(answers, state.schema, mode, novel_class=novel)
            scalars[f"novelty_auc[{mode}]"] = auc(scores, is_novel)
        scalars["novelty_auc"] = scalars[f"novelty_auc[{job.extras['novelty']}]"]
        trained = [c for c in job.test.schema if c != novel]
        scalars["mauc"] = metrics.mean_over(trained)
    elif kind == "multi":
        positives = (job.test.states == 1).sum(axis=1)
        scalars["two_positive_fraction"] = float(np.mean(positives == 2))
    return JobResult(job.arm, job.seed, metrics, scalars, len(run.epochs), run.best_epoch,
                     run.to_csv())


@dataclass
class Comparison:
    metric: str
    arm_a: str
    arm_b: str
    a: list[float]
    b: list[float]
    t: float
    p: float

    @property
    def margins(self) -> list[float]:
        return [x - y for x, y in zip(self.a, self.b)]

    @property
    def mean_margin(self) -> float:
        return float(np.mean(self.a) - np.mean(self.b))


@dataclass
class ExperimentReport:
    preset: ExperimentPreset
    seeds: list[int]
    results: list[JobResult]
    comparisons: list[Comparison]
    provenance: dict

    def values(self, arm: str, metric: str) -> list[float]:
        return [r.scalars[metric] for s in self.seeds for r in self.results
                if r.arm == arm and r.seed == s]

    def summary(self) -> str:
        lines = [f"experiment {self.preset.name}: {self.preset.description}",
                 f"seeds {self.seeds}", ""]
        metrics = sorted({k for r in self.results for k in r.scalars})
        for arm in self.preset.arms:
            for metric in metrics:
                vals = self.values(arm.name, metric)
                if len(vals) != len(self.seeds) or any(v is None for v in vals):
                    continue
                sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                lines.append(f"  {arm.name:<16} {metric:<28} {100 * np.mean(vals):7.2f} "
                             f"+/- {100 * sd:5.2f}  per seed "
                             + " ".join(f"{100 * v:.2f}" for v in vals))
        lines.append("")
        for c in self.comparisons:
            lines.append(f"  {c.metric}: {c.arm_a} - {c.arm_b} = {100 * c.mean_margin:+.2f} points "
                         f"(per seed {' '.join(f'{100 * m:+.2f}' for m in c.margins)}; "
                         f"Welch t={c.t:.3f}, p={c.p:.4f})")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for r in self.results:
            rows.extend(metrics_csv_rows(f"{self.preset.name}/{r.arm}", r.seed, r.metrics))
        write_metrics_csv(out / "auc.csv", rows)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["experiment", "arm", "seed", "metric", "value"])
            for r in self.results:
                for k in sorted(r.scalars):
                    w.writerow([self.preset.name, r.arm, r.seed, k, repr(r.scalars[k])])
            for c in self.comparisons:
                w.writerow([self.preset.name, f"{c.arm_a} vs {c.arm_b}", "all",
                            f"{c.metric}:mean_margin", repr(c.mean_margin)])
                w.writerow([self.preset.name, f"{c.arm_a} vs {c.arm_b}", "all",
                            f"{c.metric}:t", repr(c.t)])
                w.writerow([self.preset.name, f"{c.arm_a} vs {c.arm_b}", "all",
                            f"{c.metric}:p", repr(c.p)])
        runs = out / "runs"
        runs.mkdir(exist_ok=True)
        for r in self.results:
            (runs / f"{_slug(r.arm)}-seed{r.seed}.csv").write_text(r.metrics_csv)
        (out / "summary.txt").write_text(self.summary())
        (out / "provenance.json").write_text(json.dumps(self.provenance, indent=1,
                                                        sort_keys=True, default=str) + "\n")
        return out


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_=" else "_" for c in name)


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    if math.isinf(d["sharpen"]["t"]):
        d["sharpen"]["t"] = "inf"
    return d


def run_preset(name: str, *, seeds=None, base: TrainConfig | None = None,
               idx_dir: str | None = None, model_config: ModelConfig | None = None,
               force: dict | None = None, recipe: dict | None = None,
               jobs: int = 1, log: Callable[[str], None] | None = None) -> ExperimentReport:
    """Run every arm of preset ``name`` for each seed.

    ``force`` holds training settings the caller set explicitly; ``recipe``
    replaces entries of the preset's dataset recipe (e.g. smaller counts).
    """
    if name not in PRESETS:
        raise KeyError(name)
    preset = PRESETS[name]
    if recipe:
        unknown = set(recipe) - set(preset.recipe)
        if unknown:
            raise ContractError(f"preset {name} has no recipe keys {sorted(unknown)}; "
                                f"known: {sorted(preset.recipe)}")
        preset = replace(preset, recipe={**preset.recipe, **recipe})
    seeds = list(preset.seeds if seeds is None else seeds)
    base = base or TrainConfig()
    job_list = build_jobs(preset, seeds, base, idx_dir, model_config, force)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_job, job_list))
    else:
        results = []
        for job in job_list:
            results.append(run_job(job))
            if log:
                r = results[-1]
                log(f"{name} {r.arm} seed={r.seed}: "
                    + ", ".join(f"{k}={v:.4f}" for k, v in sorted(r.scalars.items()))
                    + f" ({r.epochs} epochs, best {r.best_epoch})")
    comparisons = []
    by = {(r.arm, r.seed): r for r in results}
    for metric, a, b in preset.comparisons:
        va = [by[(a, s)].scalars[metric] for s in seeds]
        vb = [by[(b, s)].scalars[metric] for s in seeds]
        t, p = two_sample_t_test(va, vb) if len(seeds) >= 2 else (float("nan"), float("nan"))
        comparisons.append(Comparison(metric, a, b, va, vb, t, p))
    hashes = {}
    for job in job_list:
        for split in ("train", "valid", "test"):
            hashes[f"{job.arm}/seed{job.seed}/{split}"] = content_hash(getattr(job, split))
    provenance = {
        "preset": preset.name,
        "recipe": preset.recipe,
        "seeds": seeds,
        "explicit_settings": force or {},
        "corpus": idx_dir or f"synthetic(seed={SYNTH_SEED})",
        "configs": {f"{j.arm}/seed{j.seed}": {"train": _config_dict(j.config),
                                              "model": asdict(j.model_config),
                                              "extras": {k: v for k, v in j.extras.items()
                                                         if k not in preset.recipe}}
                    for j in job_list},
        "dataset_hashes": hashes,
    }
    return ExperimentReport(preset, seeds, results, comparisons, provenance)
