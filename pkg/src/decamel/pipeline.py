"""End-to-end runs: seeding, training variants, evaluation and model persistence."""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camel import (
    AsymmetricMetric,
    CamelConfig,
    camel_fit,
    identity_metric,
    metric_from_dict,
    metric_to_dict,
    random_metric,
    symmetric_fit,
)
from .clustering import ClusterState, kmeans
from .errors import ConfigurationError, ParseError
from .evaluation import EvalReport, pca_project_2d, run_protocol, write_projection_csv
from .extractors import extractor_from_dict, make_extractor
from .joint import DecamelConfig, TrainedModel, decamel_train
from .views import (
    cluster_views,
    expand_metric,
    prototypes_from_dict,
    prototypes_to_dict,
    recompute_prototypes,
    relabel_views,
)

log = logging.getLogger(__name__)

INITS = ("camel", "identity", "random")
EXTRACTORS = ("identity", "linear", "mlp")
MODEL_FORMAT = "decamel-model/1"


def derive_seed(root: int, subsystem: str) -> int:
    """Independent 32-bit seed for ``subsystem`` from the root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=(zlib.crc32(subsystem.encode()),))
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class TrainOptions:
    seed: int = 0
    extractor: str = "linear"
    hidden: int | None = None
    init: str = "camel"
    symmetric: bool = False
    freeze: tuple = ()
    view_clusters: int | None = None
    ivc: bool = False
    labels_fraction: float = 0.0
    exclude_views: tuple = ()
    camel: CamelConfig = field(default_factory=CamelConfig)
    decamel: DecamelConfig = field(default_factory=DecamelConfig)

    def validate(self):
        """Checks that need no data; run before any computation."""
        if self.extractor not in EXTRACTORS:
            raise ConfigurationError(f"extractor must be one of {EXTRACTORS}")
        if self.init not in INITS:
            raise ConfigurationError(f"init must be one of {INITS}")
        bad = set(self.freeze) - {"metric", "extractor"}
        if bad:
            raise ConfigurationError(f"cannot freeze {sorted(bad)}")
        if self.symmetric and self.view_clusters is not None:
            raise ConfigurationError("--symmetric and --view-clusters are mutually exclusive")
        if self.ivc and self.view_clusters is None:
            raise ConfigurationError("--ivc needs --view-clusters")
        if self.view_clusters is not None and self.view_clusters < 1:
            raise ConfigurationError("--view-clusters must be >= 1")
        if not 0.0 <= self.labels_fraction <= 1.0:
            raise ConfigurationError("--labels-fraction must lie in [0, 1]")
        if self.labels_fraction > 0 and self.init != "camel":
            raise ConfigurationError("--labels-fraction needs --init camel")
        self.camel.validate()
        self.decamel.validate()


def select_labels(dataset, fraction, seed) -> list:
    """(sample, identity) pairs for a random ``fraction`` of the labeled samples."""
    if fraction <= 0:
        return []
    if not dataset.labeled:
        raise ConfigurationError("--labels-fraction needs a labeled training set")
    n = int(round(fraction * len(dataset)))
    idx = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:n])
    return [(int(i), int(dataset.identities[i])) for i in idx]


def _initial_state(Y, K, seed, max_iter) -> ClusterState:
    return kmeans(Y, min(K, Y.shape[0]), seed=seed, max_iter=max_iter)


def _initialize(X, views, V, opts: TrainOptions, labels):
    """(metric, state) for the joint phase, in the space of ``V`` training views."""
    cfg = replace(opts.camel, seed=derive_seed(opts.seed, "camel"))
    if opts.init == "camel":
        fit = symmetric_fit if opts.symmetric else camel_fit
        res = fit(X, views, V, cfg, labels=labels or None)
        return res.metric, res.state
    if opts.init == "identity":
        metric = identity_metric(X.shape[1], V)
    else:
        T = cfg.target_dim or X.shape[1]
        metric = random_metric(X.shape[1], T, V, derive_seed(opts.seed, "random-metric"))
        if opts.symmetric:
            metric = AsymmetricMetric.tied(metric.transforms[0], V)
    state = _initial_state(metric.project(X, views), cfg.K, cfg.seed, cfg.kmeans_max_iter)
    return metric, state


def train(dataset, opts: TrainOptions = TrainOptions()) -> TrainedModel:
    """CAMEL (or another) initialization followed by joint training.

    Views listed in ``exclude_views`` are dropped from training. The returned
    model maps every original view id it saw to a metric view through
    ``view_map``; with view clustering, other views are routed through the
    prototypes.
    """
    opts.validate()
    excluded = sorted(set(int(v) for v in opts.exclude_views))
    if excluded:
        keep = ~np.isin(dataset.views, excluded)
        dataset = dataset.subset(np.flatnonzero(keep))
    train_views = sorted(int(v) for v in np.unique(dataset.views))
    if not train_views:
        raise ConfigurationError("every view is excluded from training")
    if opts.view_clusters is not None and opts.view_clusters > len(train_views):
        raise ConfigurationError(
            f"--view-clusters {opts.view_clusters} exceeds the {len(train_views)} training views"
        )

    extractor = make_extractor(
        opts.extractor, dataset.dim, seed=derive_seed(opts.seed, "extractor"), hidden=opts.hidden
    )
    dcfg = replace(opts.decamel, seed=derive_seed(opts.seed, "decamel"))
    for part in opts.freeze:
        dcfg = replace(dcfg, **{f"freeze_{part}": True})
    labels = select_labels(dataset, opts.labels_fraction, derive_seed(opts.seed, "labels"))

    compact = {v: j + 1 for j, v in enumerate(train_views)}
    prototypes = prototype_views = None
    if opts.symmetric:
        view_map = {v: 1 for v in train_views}
    elif opts.view_clusters is not None:
        prototypes = cluster_views(dataset, extractor, opts.view_clusters, derive_seed(opts.seed, "views"))
        view_map = dict(prototypes.assignment)
    else:
        view_map = compact

    X0 = extractor.forward(dataset.X)
    if opts.ivc:
        # Clustered views only shape the initialization; every view keeps its own transform.
        grouped = relabel_views(dataset, prototypes)
        proto_metric, state = _initialize(X0, grouped.views, prototypes.J, opts, labels)
        expanded = expand_metric(proto_metric, prototypes, max(train_views))
        metric = AsymmetricMetric(tuple(expanded.transforms[v - 1] for v in train_views))
        view_map = compact
        prototype_views = {j: compact[prototypes.members(j)[0]] for j in range(1, prototypes.J + 1)}
    else:
        V = max(view_map.values())
        mviews = np.array([view_map[int(v)] for v in dataset.views])
        metric, state = _initialize(X0, mviews, V, opts, labels)
    joint_set = dataset.with_views(np.array([view_map[int(v)] for v in dataset.views]), metric.V)

    model = decamel_train(joint_set, extractor, (metric, state), dcfg)
    if opts.symmetric:
        model.view_map = None
        model.metric = AsymmetricMetric.tied(model.metric.transforms[0], max(train_views))
    else:
        model.view_map = view_map
    if prototypes is not None:
        model.prototypes = recompute_prototypes(dataset, model.extractor, prototypes)
        model.prototype_views = prototype_views
    model.config = {
        "seed": opts.seed,
        "extractor": opts.extractor,
        "init": opts.init,
        "symmetric": opts.symmetric,
        "freeze": sorted(opts.freeze),
        "view_clusters": opts.view_clusters,
        "ivc": opts.ivc,
        "labels_fraction": opts.labels_fraction,
        "exclude_views": excluded,
        "camel": dict(opts.camel.__dict__),
        "decamel": dict(dcfg.__dict__),
    }
    return model


def camel_only(dataset, opts: TrainOptions = TrainOptions()) -> TrainedModel:
    """The initialization alone, packaged as a model (no joint phase)."""
    return train(dataset, replace(opts, decamel=replace(opts.decamel, iterations=0)))


def evaluate(dataset, model, mode="single", repetitions=10, seed=0, probe_views=None, max_rank=20) -> EvalReport:
    """``run_protocol`` with its sampling seed derived from the root seed."""
    return run_protocol(
        dataset,
        model,
        mode=mode,
        repetitions=repetitions,
        seed=derive_seed(seed, "eval"),
        probe_views=probe_views,
        max_rank=max_rank,
    )


def export_projection(dataset, model, path, space="shared"):
    """Write 2-D PCA coordinates of raw rows or shared-space projections to CSV."""
    if space == "raw":
        points = dataset.X
    elif space == "shared":
        points = dataset.X if model is None else model.embed(dataset.X, dataset.views)
    else:
        raise ConfigurationError("space must be 'raw' or 'shared'")
    coords, explained = pca_project_2d(points)
    write_projection_csv(path, coords, dataset.views, dataset.identities)
    return coords, explained


# -- persistence ----------------------------------------------------------


def model_to_dict(model: TrainedModel) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "metric": metric_to_dict(model.metric, lam=model.config.get("decamel", {}).get("lam")),
        "extractor": model.extractor.to_dict(),
        "config": model.config,
        "view_map": None
        if model.view_map is None
        else {str(v): int(j) for v, j in sorted(model.view_map.items())},
        "prototypes": None if model.prototypes is None else prototypes_to_dict(model.prototypes),
        "prototype_views": None
        if model.prototype_views is None
        else {str(j): int(v) for j, v in sorted(model.prototype_views.items())},
    }
    if model.state is not None:
        doc["clusters"] = {
            "assignments": model.state.assignments.tolist(),
            "centroids": model.state.centroids.tolist(),
        }
    return doc


def model_from_dict(doc) -> TrainedModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"not a model document (format {doc.get('format')!r})")
    metric = metric_from_dict(doc["metric"])
    extractor = extractor_from_dict(doc["extractor"])
    state = None
    if doc.get("clusters"):
        state = ClusterState(
            np.array(doc["clusters"]["assignments"], dtype=np.int64),
            np.array(doc["clusters"]["centroids"], dtype=np.float64),
        )
    vm, pv = doc.get("view_map"), doc.get("prototype_views")
    return TrainedModel(
        extractor=extractor,
        metric=metric,
        state=state,
        config=doc.get("config", {}),
        view_map=None if vm is None else {int(v): int(j) for v, j in vm.items()},
        prototypes=None if doc.get("prototypes") is None else prototypes_from_dict(doc["prototypes"]),
        prototype_views=None if pv is None else {int(j): int(v) for j, v in pv.items()},
    )


def dump_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_model(model: TrainedModel, path):
    dump_json(model_to_dict(model), path)


def load_model(path) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"no such model file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed model file: {exc.msg}", line=exc.lineno) from None
    return model_from_dict(doc)


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(trace):
            writer.writerow([step, repr(float(loss))])
