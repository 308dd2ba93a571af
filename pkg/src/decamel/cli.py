"""Command line: ``generate``, ``train``, ``eval`` and ``export-projection``.

Values come from built-in defaults, then the INI file given by ``--config``
(a ``[global]`` section plus one section per command), then flags.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .camel import CamelConfig
from .dataset import SyntheticConfig, generate_synthetic, load_dataset, save_dataset, split_train_test
from .errors import ConfigurationError, DecamelError, InvariantError, NumericalError
from .joint import CONSTRAINT_FORMS, DecamelConfig
from .pipeline import (
    EXTRACTORS,
    INITS,
    TrainOptions,
    derive_seed,
    dump_json,
    evaluate,
    export_projection,
    load_model,
    save_model,
    train,
    write_trace_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INTERNAL = 0, 2, 3, 1

DEFAULTS = {
    "generate": {
        "identities": 20,
        "views": 2,
        "images": 4,
        "dim": 8,
        "spread": 0.3,
        "noise": 0.09,
        "distortion": 0.8,
        "view_groups": None,
        "group_jitter": 0.15,
    },
    "train": {
        "data": None,
        "trace": None,
        "extractor": "linear",
        "hidden": None,
        "clusters": 500,
        "lam": 0.01,
        "gamma": 10.0,
        "iterations": 10_000,
        "learning_rate": 0.005,
        "lr_decay_step": 5_000,
        "lr_decay_factor": 5.0,
        "batch_size": 216,
        "refresh_period": 100,
        "max_alternations": 20,
        "target_dim": None,
        "constraint_form": "per_view",
        "symmetric": False,
        "freeze": [],
        "init": "camel",
        "view_clusters": None,
        "ivc": False,
        "labels_fraction": 0.0,
        "exclude_views": [],
        "split_fraction": None,
    },
    "eval": {
        "data": None,
        "model": None,
        "mode": "single",
        "repetitions": 10,
        "max_rank": 20,
        "unseen_views": [],
        "split_fraction": None,
    },
    "export-projection": {
        "data": None,
        "model": None,
        "space": "shared",
        "split_fraction": None,
    },
}


def _view_list(text):
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view ids, got {text!r}") from None


def _freeze_list(text):
    parts = [t for t in str(text).replace(" ", "").split(",") if t]
    bad = [p for p in parts if p not in ("metric", "extractor")]
    if bad:
        raise argparse.ArgumentTypeError(f"cannot freeze {bad}")
    return parts


def _global_options(parser):
    s = argparse.SUPPRESS
    parser.add_argument("--config", metavar="PATH", default=s, help="INI file with per-command sections")
    parser.add_argument("--seed", type=int, default=s, help="root seed (required here or in the config)")
    parser.add_argument("--out", metavar="PATH", default=s, help="output file")
    parser.add_argument("-v", "--verbose", action="store_true", default=s)


def build_parser() -> argparse.ArgumentParser:
    s = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=s)
    _global_options(common)

    parser = argparse.ArgumentParser(prog="decamel", description=__doc__.splitlines()[0])
    _global_options(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], argument_default=s, help="write a synthetic dataset")
    gen.add_argument("--identities", type=int)
    gen.add_argument("--views", type=int)
    gen.add_argument("--images", type=int, help="images per identity and view")
    gen.add_argument("--dim", type=int)
    gen.add_argument("--spread", type=float, help="identity spread")
    gen.add_argument("--noise", type=float, help="within-identity noise")
    gen.add_argument("--distortion", type=float, help="view distortion strength")
    gen.add_argument("--view-groups", type=int)
    gen.add_argument("--group-jitter", type=float)

    tr = sub.add_parser("train", parents=[common], argument_default=s, help="fit CAMEL then DECAMEL")
    tr.add_argument("--data", metavar="CSV")
    tr.add_argument("--trace", metavar="CSV", help="loss trace path (default: next to the model)")
    tr.add_argument("--extractor", choices=EXTRACTORS)
    tr.add_argument("--hidden", type=int, help="hidden width of the mlp extractor")
    tr.add_argument("--clusters", type=int, help="number of clusters K")
    tr.add_argument("--lam", type=float, help="cross-view consistency weight")
    tr.add_argument("--gamma", type=float, help="soft constraint weight")
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--lr-decay-step", type=int)
    tr.add_argument("--lr-decay-factor", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--refresh-period", type=int, help="steps between centroid refreshes")
    tr.add_argument("--max-alternations", type=int)
    tr.add_argument("--target-dim", type=int)
    tr.add_argument("--constraint-form", choices=CONSTRAINT_FORMS)
    tr.add_argument("--symmetric", action="store_true", help="one transformation shared by all views")
    tr.add_argument("--freeze", type=_freeze_list, help="metric, extractor or both (comma-separated)")
    tr.add_argument("--init", choices=INITS)
    tr.add_argument("--view-clusters", type=int, metavar="J")
    tr.add_argument("--ivc", action="store_true", help="view clustering for the initialization only")
    tr.add_argument("--labels-fraction", type=float)
    tr.add_argument("--exclude-views", type=_view_list, help="views held out of training")
    tr.add_argument("--split-fraction", type=float, help="train on this share of identities")

    ev = sub.add_parser("eval", parents=[common], argument_default=s, help="cross-view retrieval report")
    ev.add_argument("--data", metavar="CSV")
    ev.add_argument("--model", metavar="JSON")
    ev.add_argument("--mode", choices=("single", "multi"))
    ev.add_argument("--repetitions", type=int)
    ev.add_argument("--max-rank", type=int)
    ev.add_argument("--unseen-views", type=_view_list, help="probe only these views, unseen in training")
    ev.add_argument("--split-fraction", type=float, help="evaluate on the held-out identities")

    ex = sub.add_parser("export-projection", parents=[common], argument_default=s, help="2-D PCA coordinates")
    ex.add_argument("--data", metavar="CSV")
    ex.add_argument("--model", metavar="JSON")
    ex.add_argument("--space", choices=("raw", "shared"))
    ex.add_argument("--split-fraction", type=float, help="export the held-out identities")
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _coerce(action, raw):
    """Convert a config-file string the way the matching flag would."""
    if isinstance(action, argparse._StoreTrueAction):
        value = configparser.ConfigParser.BOOLEAN_STATES.get(raw.strip().lower())
        if value is None:
            raise ConfigurationError(f"{action.dest}: expected a boolean, got {raw!r}")
        return value
    try:
        value = action.type(raw) if action.type else raw
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise ConfigurationError(f"{action.dest}: {exc}") from None
    if action.choices is not None and value not in action.choices:
        raise ConfigurationError(f"{action.dest}: {value!r} is not one of {sorted(action.choices)}")
    return value


def resolve(argv=None) -> dict:
    """Parse flags and merge them over the config file and defaults."""
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    settings = dict(DEFAULTS[command])
    settings.update(seed=None, out=None, verbose=False)

    if "config" in args:
        path = Path(args["config"])
        if not path.is_file():
            raise ConfigurationError(f"no such config file: {path}")
        ini = configparser.ConfigParser()
        try:
            ini.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config file: {exc}") from None
        actions = {a.dest: a for a in _subparser(parser, command)._actions}
        for section in ("global", command):
            if not ini.has_section(section):
                continue
            for key, raw in ini.items(section):
                dest = key.replace("-", "_")
                if dest not in actions or dest in ("config", "help"):
                    raise ConfigurationError(f"[{section}] has unknown key {key!r}")
                settings[dest] = _coerce(actions[dest], raw)
    args.pop("config", None)
    settings.update(args)
    if settings["seed"] is None:
        raise ConfigurationError("a seed is required (--seed or 'seed' in the config file)")
    settings["command"] = command
    return settings


def _require(settings, *keys):
    missing = [k for k in keys if settings.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ConfigurationError(f"{settings['command']} needs {flags}")


def _load_split(settings, part):
    data = load_dataset(settings["data"])
    frac = settings.get("split_fraction")
    if frac is None:
        return data
    train_part, test_part = split_train_test(data, frac, derive_seed(settings["seed"], "split"))
    return train_part if part == "train" else test_part


def _check_dims(dataset, model):
    if model.extractor.in_dim != dataset.dim:
        raise ConfigurationError(
            f"model expects {model.extractor.in_dim} input features, dataset has {dataset.dim}"
        )


def cmd_generate(settings):
    _require(settings, "out")
    cfg = SyntheticConfig(
        num_identities=settings["identities"],
        views=settings["views"],
        images_per_identity_per_view=settings["images"],
        dim=settings["dim"],
        identity_spread=settings["spread"],
        within_identity_noise=settings["noise"],
        view_distortion_strength=settings["distortion"],
        seed=derive_seed(settings["seed"], "generate"),
        view_groups=settings["view_groups"],
        group_jitter=settings["group_jitter"],
    )
    cfg.validate()
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, settings["out"])
    print(f"wrote {len(dataset)} samples to {settings['out']}")


def train_options(settings) -> TrainOptions:
    camel = CamelConfig(
        lam=settings["lam"],
        K=settings["clusters"],
        target_dim=settings["target_dim"],
        max_alternations=settings["max_alternations"],
    )
    decamel = DecamelConfig(
        lam=settings["lam"],
        gamma=settings["gamma"],
        iterations=settings["iterations"],
        learning_rate=settings["learning_rate"],
        lr_decay_step=settings["lr_decay_step"],
        lr_decay_factor=settings["lr_decay_factor"],
        batch_size=settings["batch_size"],
        centroid_refresh_period=settings["refresh_period"],
        constraint_form=settings["constraint_form"],
    )
    return TrainOptions(
        seed=settings["seed"],
        extractor=settings["extractor"],
        hidden=settings["hidden"],
        init=settings["init"],
        symmetric=settings["symmetric"],
        freeze=tuple(settings["freeze"]),
        view_clusters=settings["view_clusters"],
        ivc=settings["ivc"],
        labels_fraction=settings["labels_fraction"],
        exclude_views=tuple(settings["exclude_views"]),
        camel=camel,
        decamel=decamel,
    )


def cmd_train(settings):
    _require(settings, "data", "out")
    opts = train_options(settings)
    opts.validate()
    dataset = _load_split(settings, "train")
    unknown = sorted(set(opts.exclude_views) - set(int(v) for v in np.unique(dataset.views)))
    if unknown:
        raise ConfigurationError(f"--exclude-views lists views absent from the data: {unknown}")
    model = train(dataset, opts)
    save_model(model, settings["out"])
    trace = settings["trace"] or str(Path(settings["out"]).with_suffix(".trace.csv"))
    write_trace_csv(model.loss_trace, trace)
    print(f"wrote model to {settings['out']} and loss trace to {trace}")


def cmd_eval(settings):
    _require(settings, "data", "model")
    model = load_model(settings["model"])
    dataset = _load_split(settings, "test")
    _check_dims(dataset, model)
    unseen = settings["unseen_views"] or None
    if unseen:
        seen = [v for v in unseen if model.view_map is not None and v in model.view_map]
        if seen:
            raise ConfigurationError(f"views {seen} were used in training")
    report = evaluate(
        dataset,
        model,
        mode=settings["mode"],
        repetitions=settings["repetitions"],
        seed=settings["seed"],
        probe_views=unseen,
        max_rank=settings["max_rank"],
    )
    doc = report.to_dict()
    if settings["out"]:
        dump_json(doc, settings["out"])
    else:
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    print(f"rank-1 {report.rank1:.4f}  mAP {report.mAP:.4f}  S {report.s_value:.4f}", file=sys.stderr)


def cmd_export_projection(settings):
    _require(settings, "data", "out")
    dataset = _load_split(settings, "test")
    model = None
    if settings["space"] == "shared":
        _require(settings, "model")
        model = load_model(settings["model"])
        _check_dims(dataset, model)
    elif settings["model"] is not None:
        _check_dims(dataset, load_model(settings["model"]))
    _, explained = export_projection(dataset, model, settings["out"], settings["space"])
    print(f"wrote {len(dataset)} rows to {settings['out']} (explained variance {explained[0]:.4g}, {explained[1]:.4g})")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-projection": cmd_export_projection,
}


def main(argv=None) -> int:
    try:
        settings = resolve(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except ConfigurationError as exc:
        print(f"decamel: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if settings["verbose"] else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[settings["command"]](settings)
    except ConfigurationError as exc:
        print(f"decamel: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"decamel: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvariantError as exc:
        print(f"decamel: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DecamelError, ValueError, OSError) as exc:
        print(f"decamel: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
