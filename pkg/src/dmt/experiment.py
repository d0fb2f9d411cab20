"""End-to-end split / train / pool / aggregate / evaluate protocol.

Rows follow the usual results layout: each part alone, incremental unions
trained centrally, all parts together (``Pall``), incremental aggregates
``COM(...)`` and a few reordered or weighted aggregates. Every trained or
aggregated model goes through the pool; part models are pulled back before
aggregation.
"""
from __future__ import annotations

import contextlib
import csv
import io
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .datasets import AnnotatedDataset, merge_datasets, split_dataset
from .detector import DetectorTrainParams, evaluate_detector, train_detector
from .ert import ErtTrainParams, evaluate_ert, train_ert
from .pool.client import PoolClient, aggregate_from_pool
from .pool.server import serve

# reordered aggregates for six parts (0-based part indices)
DETECTOR_EXTRAS_6 = ([4, 2, 0, 1, 5, 3], [1, 0, 5, 3, 2, 4], [0, 1, 2, 3, 4, 5, 5])
ERT_EXTRAS_6 = ([5, 1, 3, 0, 4, 2],)

# desk-scale defaults for the synthetic corpora
DETECTOR_DEFAULTS = {"count": 600, "holdout": 120}
ERT_DEFAULTS = {"count": 300, "holdout": 60,
                "params": {"oversampling": 10, "cascades": 10, "trees_per_cascade": 50,
                           "feature_pool_size": 200}}


@dataclass
class ExperimentRow:
    label: str
    kind: str  # part | union | all | com
    members: list
    n_images: int
    metrics: dict
    model_id: str


@dataclass
class ExperimentResult:
    kind: str
    dataset: str
    rows: list = field(default_factory=list)

    def row(self, label) -> ExperimentRow:
        return next(r for r in self.rows if r.label == label)

    @property
    def metric_names(self):
        return ["recall", "precision"] if self.kind == "detector" else ["mean_error"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "row", "type", "n_images", *self.metric_names, "model_id"])
        for r in self.rows:
            w.writerow([self.dataset, r.label, r.kind, r.n_images,
                        *(repr(float(r.metrics[m])) for m in self.metric_names), r.model_id])
        return buf.getvalue()

    def to_text(self) -> str:
        names = [f"{self.dataset}-{r.label}" for r in self.rows]
        width = max(len("Dataset"), *(len(n) for n in names))
        if self.kind == "detector":
            head = f"{'Dataset':<{width}}  {'Recall':>7}  {'Precision':>9}"
            lines = [f"{n:<{width}}  {r.metrics['recall']:>7.3f}  {r.metrics['precision']:>9.3f}"
                     for n, r in zip(names, self.rows)]
        else:
            head = f"{'Dataset':<{width}}  {'Mean error':>10}"
            lines = [f"{n:<{width}}  {r.metrics['mean_error']:>10.4f}" for n, r in zip(names, self.rows)]
        rule = "-" * len(head)
        return "\n".join([head, rule, *lines]) + "\n"


def _plus(indices):
    return "+".join(f"P{i + 1}" for i in indices)


def row_plan(n_parts: int, kind: str, seed: int = 0):
    """``(label, type, members)`` triples in table order."""
    plan = [(f"P{i + 1}", "part", [i]) for i in range(n_parts)]
    plan += [(_plus(range(k)), "union", list(range(k))) for k in range(2, n_parts)]
    plan.append(("Pall", "all", list(range(n_parts))))
    plan += [(f"COM({_plus(range(k))})", "com", list(range(k))) for k in range(2, n_parts + 1)]
    if n_parts == 6:
        extras = DETECTOR_EXTRAS_6 if kind == "detector" else ERT_EXTRAS_6
    elif n_parts > 1:
        rng = np.random.default_rng(seed)
        n_perm = 2 if kind == "detector" else 1
        extras = [rng.permutation(n_parts).tolist() for _ in range(n_perm)]
        if kind == "detector":
            extras.append(list(range(n_parts)) + [n_parts - 1])
    else:
        extras = []
    plan += [(f"COM({_plus(m)})", "com", list(m)) for m in extras]
    return plan


@contextlib.contextmanager
def _pool(address):
    if address:
        yield PoolClient(address)
        return
    with tempfile.TemporaryDirectory(prefix="dmt-pool-") as root:
        server = serve(root, "127.0.0.1:0")
        try:
            yield PoolClient(server.address)
        finally:
            server.stop()


def run_experiment(kind: str, n_parts: int = 6, seed: int = 7, dataset: AnnotatedDataset | None = None,
                   holdout=None, params: dict | None = None, pool_address: str | None = None,
                   dataset_name: str | None = None, log=None) -> ExperimentResult:
    """Run the full protocol for ``kind`` (``detector`` or ``ert``).

    Without ``dataset`` a synthetic corpus is generated from ``seed``.
    Without ``pool_address`` a private pool is started on a free local port.
    """
    from . import synth

    if kind not in ("detector", "ert"):
        raise ValueError(f"unknown experiment kind {kind!r}")
    defaults = DETECTOR_DEFAULTS if kind == "detector" else ERT_DEFAULTS
    if dataset is None:
        dataset = (synth.generate_detector_corpus(defaults["count"], seed=seed) if kind == "detector"
                   else synth.generate_landmark_corpus(defaults["count"], seed=seed))
    holdout = defaults["holdout"] if holdout is None else holdout
    name = dataset_name or dataset.name or ("SYN-DET" if kind == "detector" else "SYN-LM")
    merged = dict(defaults.get("params", {}))
    merged.update(params or {})
    if "lambda" in merged:
        merged["lambda_"] = merged.pop("lambda")
    merged["seed"] = seed
    parts, test = split_dataset(dataset, n_parts, holdout=holdout, seed=seed)
    cache: dict = {}
    say = log or (lambda msg: None)

    if kind == "detector":
        det_params = DetectorTrainParams(**merged)

        def train(ds):
            return train_detector(ds, det_params, cache=cache)

        def evaluate(model):
            rep = evaluate_detector(model, test, cache=cache)
            return {"recall": rep.recall, "precision": rep.precision}
    else:
        ert_params = ErtTrainParams(**merged)

        def train(ds):
            return train_ert(ds, ert_params)

        def evaluate(model):
            return {"mean_error": evaluate_ert(model, test)}

    result = ExperimentResult(kind, name)
    with _pool(pool_address) as client:
        part_ids = {}
        for label, rtype, members in row_plan(n_parts, kind, seed):
            if rtype == "com":
                say(f"aggregating {label}")
                agg = aggregate_from_pool(client, [part_ids[i] for i in members], kind,
                                          {"dataset_label": f"{name}-{label}"})
                metrics = evaluate(agg.model)
                eid = client.push(agg.model, {**agg.metadata, "metrics": metrics})
                n_images = sum(len(parts[i]) for i in members)
            else:
                say(f"training {label}")
                train_set = merge_datasets([parts[i] for i in members], f"{name}-{label}")
                model = train(train_set)
                metrics = evaluate(model)
                eid = client.push(model, {"dataset_label": f"{name}-{label}", "metrics": metrics})
                if rtype == "part":
                    part_ids[members[0]] = eid
                n_images = len(train_set)
            result.rows.append(ExperimentRow(label, rtype, list(members), n_images, metrics, eid))
    return result
