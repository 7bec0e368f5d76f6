"""``partlab`` command line: data generation, assembly, training, evaluation and presets.

Exit codes: 0 success, 1 usage or configuration error, 2 non-finite loss,
3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .autodiff import ContractError
from .data.augment import AugmentationConfig
from .data.idx import IdxFormatError, digits_of, write_idx_images, write_idx_labels
from .data.labels import (AssembledDataset, SourceDataset, assemble, content_hash, make_partial,
                          read_manifest, write_manifest)
from .data.synth import synthesize_digits
from .data.variants import VARIANTS, derive_variant
from .evaluation import (NOVELTY_MODES, NotEvaluable, auc, class_similarity, evaluate,
                         metrics_csv_rows, novelty_score, write_metrics_csv)
from .losses import SharpenConfig
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .training import NumericalError, TrainConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for numeric failure here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ parser

# dests of training flags; None means "not given" so presets can tell
# explicit settings from defaults
TRAIN_DESTS = {
    "epochs": "max_epochs", "batch_size": "batch_size", "lr": "learning_rate",
    "sharpen_t": "sharpen_t", "sharpen_tau": "sharpen_tau",
    "disable_adapter": "disable_adapter", "disable_pseudo": "disable_pseudo",
    "disable_consist": "disable_consist", "freeze_q": "freeze_q",
    "weak_shift": "weak_max_shift", "strong_shift": "strong_max_shift",
    "noise_sigma": "noise_sigma", "erase_size": "erase_size",
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, help="maximum epochs (default 64)")
    g.add_argument("--batch-size", type=int, help="minibatch size (default 64)")
    g.add_argument("--lr", type=float, help="initial Adam learning rate (default 2e-4)")
    g.add_argument("--sharpen-t", type=float, help="sharpen temperature; 'inf' disables (default 4)")
    g.add_argument("--sharpen-tau", type=float, help="sharpen threshold (default 0.5)")
    g.add_argument("--disable-adapter", action="store_true", default=None,
                   help="keep the task encoding fixed at the identity")
    g.add_argument("--disable-pseudo", action="store_true", default=None,
                   help="drop the pseudo-label term")
    g.add_argument("--disable-consist", action="store_true", default=None,
                   help="drop the weak/strong consistency term")
    g.add_argument("--freeze-q", action="store_true", default=None,
                   help="do not update the task encoding")
    g.add_argument("--weak-shift", type=int, help="weak view max translation in pixels (default 2)")
    g.add_argument("--strong-shift", type=int, help="strong view max translation (default 4)")
    g.add_argument("--noise-sigma", type=float, help="strong view Gaussian noise (default 0.1)")
    g.add_argument("--erase-size", type=int, help="strong view erased square side (default 8)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partlab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flat dotted keys; flags override it")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic digit corpus or a derived variant")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count-per-class", type=int, default=30)
    p.add_argument("--test-count-per-class", type=int,
                   help="test split size for variants (default: --count-per-class)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--novel-class", default="0")
    p.add_argument("--fraction", type=float, default=1.0,
                   help="fraction of the training split kept by the novel variant")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("assemble", help="merge manifests under the union of their schemas")
    p.add_argument("sources", nargs="+", metavar="MANIFEST[:CLASSES]",
                   help="a manifest, optionally restricted to comma-separated classes")
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("train", help="fit a model on a training manifest")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--valid", required=True, help="validation manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-dim", type=int, default=ModelConfig.hidden_dim)
    p.add_argument("--feature-dim", type=int, default=ModelConfig.feature_dim)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class AUC, class similarity and novelty scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest to evaluate on")
    p.add_argument("--out", help="directory for auc.csv and similarity.csv")
    p.add_argument("--novel-class", help="report the AUC of detecting this class as novel")
    p.add_argument("--novelty-mode", choices=NOVELTY_MODES, default="max-complement")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run a named desk-scale preset")
    p.add_argument("preset", help="preset name; 'list' prints them")
    p.add_argument("--out", help="report directory (default runs/<preset>)")
    p.add_argument("--seeds", help="comma-separated seeds (default: the preset's)")
    p.add_argument("--idx-dir", help="directory holding the MNIST IDX files; synthetic otherwise")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--recipe", action="append", default=[], metavar="KEY=JSON",
                   help="override a dataset recipe entry, e.g. train=500")
    _add_train_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("inspect-manifest", help="summarize a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_inspect)
    return parser


# ------------------------------------------------------------------ config


def _dest(key: str) -> str:
    return key.replace(".", "_").replace("-", "_")


def _coerce(action: argparse.Action, key: str, value):
    if isinstance(action, argparse._StoreTrueAction):
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} expects true/false, got {value!r}")
        return value
    if action.type is not None and value is not None:
        try:
            return action.type(value)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r}: cannot convert {value!r}") from None
    return value


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        doc = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config {args.config}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {args.config}: expected a JSON object of flat keys")
    sub = _subparser(parser, args.verb)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "func")}
    defaults = {}
    for key, value in doc.items():
        dest = _dest(key)
        if dest not in actions or actions[dest].required or not actions[dest].option_strings:
            raise UsageError(f"config {args.config}: unknown key {key!r} for '{args.verb}'")
        defaults[dest] = _coerce(actions[dest], key, value)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, verb: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[verb]
    raise AssertionError("parser has no subcommands")


def train_config(args, seed: int) -> TrainConfig:
    base = TrainConfig()
    given = explicit_settings(args)
    sharpen = SharpenConfig(given.pop("sharpen_t", base.sharpen.t),
                            given.pop("sharpen_tau", base.sharpen.tau))
    aug = {k: given.pop(k) for k in list(given) if k in AugmentationConfig.__dataclass_fields__}
    return replace(base, seed=seed, sharpen=sharpen,
                   augment=AugmentationConfig(**{**_aug_fields(base.augment), **aug}), **given)


def _aug_fields(cfg: AugmentationConfig) -> dict:
    return {k: getattr(cfg, k) for k in AugmentationConfig.__dataclass_fields__}


def explicit_settings(args) -> dict:
    """Training settings the user set by flag or config file."""
    out = {}
    for flag, field in TRAIN_DESTS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[field] = value
    return out


# ------------------------------------------------------------------ verbs


def _write_split(out: Path, stem: str, d: SourceDataset, labels: bool) -> None:
    image_file = "images.idx" if stem == "data" else f"{stem}-images.idx"
    write_idx_images(out / image_file, d.images)
    if labels:
        label_file = "labels.idx" if stem == "data" else f"{stem}-labels.idx"
        write_idx_labels(out / label_file, digits_of(d))
    write_manifest(assemble([d]), out / f"{stem}.json", {d.name: image_file})


def cmd_gen_data(args) -> int:
    if args.count_per_class < 1:
        raise UsageError("--count-per-class must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.variant is None:
        d = synthesize_digits(args.count_per_class, args.seed, name="synthetic")
        _write_split(out, "data", d, labels=True)
        print(f"wrote {len(d)} images to {out}")
        return EXIT_OK
    test_count = args.test_count_per_class or args.count_per_class
    train = synthesize_digits(args.count_per_class, args.seed, name="train", stream=0)
    test = synthesize_digits(test_count, args.seed, name="test", stream=2)
    train, test = derive_variant(train, args.variant, test=test, novel_class=args.novel_class,
                                 fraction=args.fraction, seed=args.seed)
    single = args.variant == "novel"
    _write_split(out, "train", train, labels=single)
    _write_split(out, "test", test, labels=single)
    print(f"wrote {args.variant} variant to {out}: {len(train)} train, {len(test)} test images")
    return EXIT_OK


def _as_source(d: AssembledDataset, name: str) -> SourceDataset:
    return SourceDataset(name, d.schema, d.images, d.states)


def cmd_assemble(args) -> int:
    out = Path(args.out)
    sources, names = [], set()
    for spec in args.sources:
        path, _, classes = spec.partition(":")
        name = Path(path).stem
        if name in names:
            name = f"{Path(path).resolve().parent.name}-{name}"
        while name in names:
            name += "_"
        names.add(name)
        src = _as_source(read_manifest(path), name)
        if classes:
            src = make_partial(src, [c for c in classes.split(",") if c], name=name)
        sources.append(src)
    merged = assemble(sources)
    out.parent.mkdir(parents=True, exist_ok=True)
    files = {}
    for src in sources:
        files[src.name] = f"{out.stem}-{src.name}.idx"
        write_idx_images(out.parent / files[src.name], src.images)
    write_manifest(merged, out, files)
    print(f"assembled {len(merged)} samples over {merged.schema.n} classes "
          f"({merged.unknown_count()} Unknown entries) into {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    train = read_manifest(args.train)
    valid = read_manifest(args.valid)
    cfg = train_config(args, args.seed)
    h, w = train.images.shape[1:]
    model_cfg = ModelConfig(h * w, args.hidden_dim, args.feature_dim)
    state = init_model(train.schema, model_cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = fit(state, train, valid, cfg,
              on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.l_total:.5f} "
                                       f"valid mAUC {r.valid_mauc:.4f} lr {r.lr:g}"))
    save_checkpoint(state, out / "checkpoint.bin")
    run.write_csv(out / "metrics.csv")
    print(f"best epoch {run.best_epoch} (valid mAUC {run.best_mauc:.4f}); wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    d = read_manifest(args.data)
    metrics = evaluate(state, d)
    for name, value in metrics.per_class.items():
        print(f"{name:>10}  {'n/a' if value is None else f'{value:.4f}'}")
    print(f"{'mAUC':>10}  {metrics.mauc:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "auc.csv", metrics_csv_rows(Path(args.data).stem, state.seed,
                                                            metrics))
        try:
            (out / "similarity.csv").write_text(class_similarity(state, d).to_csv())
        except ContractError as e:
            print(f"similarity skipped: {e}")
    if args.novel_class is not None:
        if args.novel_class not in d.schema:
            raise UsageError(f"--novel-class {args.novel_class!r} is not in the data schema")
        scores = novelty_score(state, d.images, args.novelty_mode, args.novel_class)
        is_novel = d.states[:, d.schema.index(args.novel_class)] == 1
        try:
            print(f"novelty AUC ({args.novelty_mode}, class {args.novel_class}): "
                  f"{auc(scores, is_novel):.4f}")
        except NotEvaluable as e:
            print(f"novelty AUC not evaluable: {e}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import PRESETS, run_preset

    if args.preset == "list":
        for p in PRESETS.values():
            print(f"{p.name:<20} {p.description}")
        return EXIT_OK
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; valid: {', '.join(PRESETS)}")
    seeds = None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}")
    recipe = {}
    for item in args.recipe:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--recipe expects KEY=VALUE, got {item!r}")
        try:
            recipe[key] = json.loads(value)
        except json.JSONDecodeError:
            recipe[key] = value
    report = run_preset(args.preset, seeds=seeds, idx_dir=args.idx_dir, jobs=args.jobs,
                        force=explicit_settings(args), recipe=recipe, log=print)
    out = report.write(args.out or Path("runs") / args.preset)
    print(report.summary(), end="")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    d = read_manifest(args.manifest)
    print(f"manifest: {args.manifest}")
    print(f"samples: {len(d)}  image shape: {d.images.shape[1:]}")
    print(f"union schema ({d.schema.n}): {', '.join(d.schema)}")
    for s in d.sources:
        print(f"  source {s.name}: {s.count} samples, schema {', '.join(s.schema)}")
    print(f"{'class':>10} {'P':>6} {'N':>6} {'U':>6}")
    for c, name in enumerate(d.schema):
        col = d.states[:, c]
        print(f"{name:>10} {int((col == 1).sum()):>6} {int((col == 0).sum()):>6} "
              f"{int((col == -1).sum()):>6}")
    print(f"content hash: {content_hash(d)}")
    return EXIT_OK


# ------------------------------------------------------------------ entry


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IdxFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
