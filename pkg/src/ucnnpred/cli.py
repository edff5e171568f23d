"""Command-line entry point.

Every command reads one TOML run config and writes under the run's output
directory::

    <out>/features/<instrument>.csv     82-column feature matrices
    <out>/samples/<instrument>.npz      normalised train/validation/test windows
    <out>/models/*.ucnn                 base, intermediate and fine-tuned models
    <out>/reports/*.csv                 evaluation rows (one file per instrument/model)
    <out>/training/*.csv|json           per-epoch training metrics
    <out>/summary/report.csv|txt        aggregated tables from ``report``

Exit codes: 0 success, 1 empty or degenerate input, 2 usage or I/O error.
"""

import argparse
import csv
import glob
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace


from . import dataio
from . import evaluation as ev
from . import training as tr
from .features import FeatureSourceError, load_samples, save_samples
from .model import ArchitectureConfig, ModelFormatError, load_model, save_model

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("ucnnpred")

CONFIG_VERSION = 1
EXIT_OK, EXIT_EMPTY, EXIT_USAGE = 0, 1, 2
TAG_ORDER = (ev.BASE_TAG, ev.PARTIAL_TAG, ev.COMPLETE_TAG, ev.CONVENTIONAL_TAG)
MODES = {"partial": (tr.fine_tune_partial, ev.PARTIAL_TAG), "complete": (tr.fine_tune_complete, ev.COMPLETE_TAG)}


class CLIError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    instruments_dir: str
    aux_dir: str
    pool: list
    new: list
    split: dataio.SplitSpec
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "run"

    @property
    def seed(self):
        return self.seeds[0]

    @property
    def instruments(self):
        return list(self.pool) + [n for n in self.new if n not in self.pool]


def _section(doc, name):
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise CLIError(f"config: [{name}] must be a table")
    return value


def load_config(path, seed=None, out=None):
    """Parse a run config; ``seed`` and ``out`` override the file values.

    Relative paths in the file are resolved against the file's directory.
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CLIError(f"{path}: invalid TOML: {exc}") from None
    if doc.get("version") != CONFIG_VERSION:
        raise CLIError(f"{path}: unsupported config version {doc.get('version')!r} (expected {CONFIG_VERSION})")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    data = _section(doc, "data")
    try:
        inst_dir, aux_dir = resolve(data["instruments_dir"]), resolve(data["aux_dir"])
        pool = list(data["pool"])
    except KeyError as exc:
        raise CLIError(f"{path}: [data] is missing {exc.args[0]!r}") from None
    for d in (inst_dir, aux_dir):
        if not os.path.isdir(d):
            raise CLIError(f"{path}: directory not found: {d}")
    if not pool:
        raise CLIError(f"{path}: [data] pool is empty")

    sp = _section(doc, "split")
    try:
        split = dataio.SplitSpec(sp["train_end"], sp["test_start"], sp["test_end"], sp.get("val_fraction", 0.25))
    except KeyError as exc:
        raise CLIError(f"{path}: [split] is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CLIError(f"{path}: [split]: {exc}") from None

    seeds = doc.get("seeds", [doc.get("seed", 0)])
    if not isinstance(seeds, list):
        seeds = [seeds]
    if seed is not None:
        seeds = [seed]
    if not seeds:
        raise CLIError(f"{path}: seed list is empty")

    try:
        arch = ArchitectureConfig.from_dict({**ArchitectureConfig().to_dict(), **_section(doc, "architecture")})
        arch.validate()
        train = replace(tr.TrainConfig(**_section(doc, "train")), seed=int(seeds[0]))
        train.validate()
    except (TypeError, ValueError) as exc:
        raise CLIError(f"{path}: {exc}") from None

    if out is None:
        out = resolve(doc.get("out", "run"))
    return RunConfig(inst_dir, aux_dir, pool, list(data.get("new", [])), split, arch, train,
                     [int(s) for s in seeds], out)


# -- helpers -----------------------------------------------------------------

def _dir(cfg, name):
    path = os.path.join(cfg.out, name)
    os.makedirs(path, exist_ok=True)
    return path


def _samples_path(cfg, instrument):
    return os.path.join(cfg.out, "samples", f"{instrument}.npz")


def _load_split(cfg, instrument):
    path = _samples_path(cfg, instrument)
    if not os.path.exists(path):
        raise CLIError(f"no samples for {instrument!r} ({path}); run featurize first")
    parts = load_samples(path)
    return dataio.DatasetSplit(parts["train"], parts["validation"], parts["test"])


def _load_model(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise CLIError(f"model file not found: {path}") from None
    except ModelFormatError as exc:
        raise CLIError(f"{path}: {exc}") from None


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_training(cfg, stem, report):
    d = _dir(cfg, "training")
    _write_text(os.path.join(d, f"{stem}.csv"), report.to_csv())
    _write_text(os.path.join(d, f"{stem}.json"), report.to_json())


def _write_eval(cfg, stem, report):
    ev.write_reports_csv([report], os.path.join(_dir(cfg, "reports"), f"{stem}.csv"))
    print(",".join(report.row()))


def _selected(cfg, names, default):
    names = names or default
    unknown = [n for n in names if n not in cfg.instruments]
    if unknown:
        raise CLIError(f"instrument(s) not in the config: {', '.join(unknown)}")
    return names


def _nonempty(ds, instrument, parts):
    for part in parts:
        if len(getattr(ds, part)) == 0:
            raise CLIError(f"{instrument}: empty {part} partition", EXIT_EMPTY)


# -- commands ----------------------------------------------------------------

def cmd_featurize(cfg, args):
    try:
        aux = dataio.load_aux_dir(cfg.aux_dir)
    except FileNotFoundError as exc:
        raise CLIError(str(exc)) from None
    fdir, sdir = _dir(cfg, "features"), _dir(cfg, "samples")
    for name in _selected(cfg, args.instrument, cfg.instruments):
        path = os.path.join(cfg.instruments_dir, f"{name}.csv")
        if not os.path.exists(path):
            raise CLIError(f"instrument file not found: {path}")
        try:
            matrix = dataio.featurize_instrument(path, aux, name)
        except FeatureSourceError as exc:
            raise CLIError(f"{name}: missing feature source {exc}") from None
        matrix.to_csv(os.path.join(fdir, f"{name}.csv"))
        try:
            ds = dataio.prepare_instrument(matrix, cfg.split, cfg.architecture.window,
                                           allow_empty=("validation", "test"))
        except ValueError as exc:
            raise CLIError(str(exc), EXIT_EMPTY) from None
        save_samples(os.path.join(sdir, f"{name}.npz"), ds.parts())
        print(f"{name}: {len(matrix)} rows, {int(matrix.row_valid.sum())} valid, "
              f"{int((~matrix.mask).sum())} masked cells, windows train {len(ds.train)} "
              f"validation {len(ds.validation)} test {len(ds.test)} discarded {ds.discarded}")
    return EXIT_OK


def cmd_train_base(cfg, args):
    splits = {name: _load_split(cfg, name) for name in cfg.pool}
    for name, ds in splits.items():
        _nonempty(ds, name, ("train", "validation"))
    train_set, val_set = tr.pool_partitions(splits)
    arch, tcfg = cfg.architecture, cfg.train
    if args.max_epochs is not None:
        tcfg = replace(tcfg, max_epochs=args.max_epochs)
    mdir = _dir(cfg, "models")

    def save_stage(depth, model, report):
        save_model(model, os.path.join(mdir, f"base_depth{depth}.ucnn"))
        _write_training(cfg, f"base_depth{depth}", report)
        print(f"depth {depth}: {len(report.epochs)} epochs, best epoch {report.best_epoch}, "
              f"val macro-F {report.best.val_macro_f if report.best else float('nan'):.4f}")

    try:
        if args.depth_only is not None:
            if not 2 <= args.depth_only <= arch.max_depth:
                raise CLIError(f"--depth-only must be in [2, {arch.max_depth}]")
            from .model import build_subcnn
            model = build_subcnn(arch, args.depth_only, tr._stage_seed(tcfg.seed, args.depth_only, 0))
            model, report = tr.train(model, train_set, val_set,
                                     replace(tcfg, seed=tr._stage_seed(tcfg.seed, args.depth_only, 1)))
            model.metadata = {"seed": tcfg.seed, "provenance": f"single depth {args.depth_only}",
                              "tag": f"{ev.BASE_TAG} ({args.depth_only} layers)"}
            save_stage(args.depth_only, model, report)
            return EXIT_OK
        base, _ = tr.layerwise_train(arch, train_set, val_set, tcfg, on_stage_end=save_stage)
    except tr.TrainingError as exc:
        raise CLIError(str(exc), EXIT_EMPTY) from None
    save_model(base, os.path.join(mdir, "base.ucnn"))
    for name, ds in splits.items():
        if len(ds.test):
            _write_eval(cfg, f"{name}__base", ev.evaluate(base, ds.test, name, ev.BASE_TAG))
    return EXIT_OK


def cmd_finetune(cfg, args):
    base_path = args.base or os.path.join(cfg.out, "models", "base.ucnn")
    base = _load_model(base_path)
    tune, tag = MODES[args.mode]
    tcfg = cfg.train if args.max_epochs is None else replace(cfg.train, max_epochs=args.max_epochs)
    names = _selected(cfg, args.instrument, cfg.new)
    if not names:
        raise CLIError("no instruments to fine-tune: pass --instrument or list [data] new", EXIT_EMPTY)
    splits = {}
    for name in names:
        splits[name] = _load_split(cfg, name)
        _nonempty(splits[name], name, ("train", "validation"))

    def run(name):
        ds = splits[name]
        tuned = tune(base, ds.train, ds.validation, tcfg)
        return name, tuned

    workers = min(tr._threads(), len(names))
    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(run, names))
        else:
            results = [run(n) for n in names]
    except tr.TrainingError as exc:
        raise CLIError(str(exc), EXIT_EMPTY) from None
    mdir = _dir(cfg, "models")
    for name, tuned in results:
        save_model(tuned, os.path.join(mdir, f"{name}__{args.mode}.ucnn"))
        test = splits[name].test
        if len(test):
            _write_eval(cfg, f"{name}__base", ev.evaluate(base, test, name, ev.BASE_TAG))
            _write_eval(cfg, f"{name}__{args.mode}", ev.evaluate(tuned, test, name, tag))
    return EXIT_OK


def _model_tag(model, path):
    return model.metadata.get("tag") or os.path.splitext(os.path.basename(path))[0]


def cmd_predict(cfg, args):
    model = _load_model(args.model)
    ds = _load_split(cfg, args.instrument)
    samples = getattr(ds, args.part)
    if len(samples) == 0:
        raise CLIError(f"{args.instrument}: empty {args.part} partition", EXIT_EMPTY)
    probs = tr.predict_proba(model, samples.X)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    path = os.path.join(_dir(cfg, "predictions"), f"{args.instrument}__{stem}__{args.part}.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", "label_date", "probability", "prediction", "label"])
        for d, ld, p, c, y in zip(samples.dates, samples.label_dates, probs, ev.classify(probs), samples.y):
            writer.writerow([str(d), str(ld), repr(float(p)), int(c), int(y)])
    print(path)
    return EXIT_OK


def cmd_evaluate(cfg, args):
    model = _load_model(args.model)
    ds = _load_split(cfg, args.instrument)
    if len(ds.test) == 0:
        raise CLIError(f"{args.instrument}: empty test partition", EXIT_EMPTY)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    _write_eval(cfg, f"{args.instrument}__eval_{stem}",
                ev.evaluate(model, ds.test, args.instrument, _model_tag(model, args.model)))
    return EXIT_OK


def cmd_report(cfg, args):
    run_dir = args.run_dir or cfg.out
    rdir = os.path.join(run_dir, "reports")
    files = sorted(glob.glob(os.path.join(rdir if os.path.isdir(rdir) else run_dir, "*.csv")))
    reports = []
    for path in files:
        try:
            reports += ev.read_reports_csv(path)
        except ValueError as exc:
            log.warning("skipping %s: %s", path, exc)
    if not reports:
        raise CLIError(f"no evaluation reports found in {run_dir}", EXIT_EMPTY)
    order = {tag: k for k, tag in enumerate(TAG_ORDER)}
    reports.sort(key=lambda r: order.get(r.model, len(order)))
    # the win tally is only defined over instruments scored by every model
    tables = ev.render_report(reports)
    complete = [i for i in tables.instruments if all((i, m) in tables.values for m in tables.models)]
    text = tables.text
    if not tables.wins and complete:
        wins = ev.best_count([r for r in reports if r.instrument in complete])
        text += f"\nBest macro-F count over {len(complete)} fully scored instrument(s):\n"
        text += "".join(f"  {m}: {n:g}\n" for m, n in wins.items())
    sdir = os.path.join(run_dir, "summary")
    os.makedirs(sdir, exist_ok=True)
    _write_text(os.path.join(sdir, "report.csv"), tables.csv)
    _write_text(os.path.join(sdir, "report.txt"), text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "featurize": cmd_featurize,
    "train-base": cmd_train_base,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ucnnpred", parents=[common],
                                     description="Layer-wise CNN base predictor with fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", parents=[common], help="compute features and sample windows")
    p.add_argument("--instrument", action="append", help="limit to these instruments (repeatable)")

    p = sub.add_parser("train-base", parents=[common], help="layer-wise training of the base predictor")
    p.add_argument("--depth-only", type=int, help="train a single subCNN of this depth (debug)")
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("finetune", parents=[common], help="adapt the base predictor to new instruments")
    p.add_argument("--mode", choices=sorted(MODES), required=True)
    p.add_argument("--base", help="base model path (default <out>/models/base.ucnn)")
    p.add_argument("--instrument", action="append", help="instruments to tune (default [data] new)")
    p.add_argument("--max-epochs", type=int)

    p = sub.add_parser("predict", parents=[common], help="write up-probabilities for one instrument")
    p.add_argument("--model", required=True)
    p.add_argument("--instrument", required=True)
    p.add_argument("--part", choices=["train", "validation", "test"], default="test")

    p = sub.add_parser("evaluate", parents=[common], help="score a model on an instrument's test split")
    p.add_argument("--model", required=True)
    p.add_argument("--instrument", required=True)

    p = sub.add_parser("report", parents=[common], help="aggregate evaluation reports")
    p.add_argument("run_dir", nargs="?", help="run directory (default the config's out)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config_path = getattr(args, "config", None)
        if config_path is None:
            if args.command != "report" or args.run_dir is None:
                raise CLIError("--config is required")
            cfg = None
        else:
            cfg = load_config(config_path, getattr(args, "seed", None), getattr(args, "out", None))
        return COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        print(f"ucnnpred: error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, dataio.CSVFormatError) as exc:
        print(f"ucnnpred: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
