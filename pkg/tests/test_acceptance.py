"""Desk-scale acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL criterion N: ...`` line (visible with
``-s``) and the lines are repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from dmt import detector as D
from dmt import ebc
from dmt import ert as E
from dmt import hog
from dmt.datasets import split_dataset
from dmt.errors import IntegrityError
from dmt.experiment import run_experiment
from dmt.mwma import aggregate_mwma
from dmt.pool import PoolClient, serve
from dmt.pool.blob import serialize
from dmt.synth import face_template_68, generate_detector_corpus, generate_landmark_corpus
from dmt.wba import aggregate_wba, localize_wba

import oracles
from conftest import ACCEPTANCE_LINES

SEED = 7


def report(n, ok, detail, started):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail} ({time.perf_counter() - started:.1f}s)"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def pool_server(tmp_path_factory):
    server = serve(tmp_path_factory.mktemp("acceptance-pool"), "127.0.0.1:0")
    yield server
    server.stop()


@pytest.fixture(scope="module")
def detector_run(pool_server):
    """The detector experiment over a shared pool, plus its part models and test split."""
    started = time.perf_counter()
    result = run_experiment("detector", seed=SEED, pool_address=pool_server.address)
    client = PoolClient(pool_server.address)
    parts = [client.pull(result.row(f"P{k}").model_id)[0] for k in range(1, 7)]
    corpus = generate_detector_corpus(600, seed=SEED)
    _, test = split_dataset(corpus, 6, holdout=120, seed=SEED)
    return result, parts, test, time.perf_counter() - started


@pytest.fixture(scope="module")
def ert_run(pool_server):
    started = time.perf_counter()
    result = run_experiment("ert", seed=SEED, pool_address=pool_server.address)
    client = PoolClient(pool_server.address)
    parts = [client.pull(result.row(f"P{k}").model_id)[0] for k in range(1, 7)]
    corpus = generate_landmark_corpus(300, seed=SEED)
    _, test = split_dataset(corpus, 6, holdout=60, seed=SEED)
    return result, parts, test, time.perf_counter() - started


def test_criterion_1_mwma_permutation_invariance(detector_run):
    started = time.perf_counter()
    _, parts, test, _ = detector_run
    rng = np.random.default_rng(1)
    ref = aggregate_mwma(parts)
    cache: dict = {}
    ref_recall = D.evaluate_detector(ref, test, cache=cache).recall
    worst, recalls = 0.0, set()
    for _ in range(10):
        order = rng.permutation(6)
        com = aggregate_mwma([parts[i] for i in order])
        worst = max(worst, float(np.abs(com.weights - ref.weights).max()))
        recalls.add(D.evaluate_detector(com, test, cache=cache).recall)
    ok = worst <= 1e-12 and recalls == {ref_recall}
    report(1, ok, f"10 orders, max weight diff {worst:.1e}, recalls {sorted(recalls)}", started)


def test_criterion_2_mwma_idempotence(detector_run):
    started = time.perf_counter()
    m = detector_run[1][0]
    diffs = []
    for com in (aggregate_mwma([m]), aggregate_mwma([m, m, m])):
        diffs.append(max(float(np.abs(com.weights - m.weights).max()), abs(com.bias - m.bias),
                         abs(com.detection_threshold - m.detection_threshold)))
    report(2, max(diffs) <= 1e-12, f"COM(M) diff {diffs[0]:.1e}, COM(M,M,M) diff {diffs[1]:.1e}", started)


def test_criterion_3_distributed_vs_centralized(detector_run):
    started = time.perf_counter()
    result, _, _, elapsed = detector_run
    com = result.row("COM(P1+P2+P3+P4+P5+P6)").metrics
    pall = result.row("Pall").metrics
    ok = com["recall"] >= pall["recall"] - 0.02 and com["precision"] >= 0.95
    report(3, ok, f"COM recall {com['recall']:.3f} precision {com['precision']:.3f}, "
                  f"Pall recall {pall['recall']:.3f}; experiment {elapsed:.0f}s", started)


def test_criterion_4_wba_order_invariance(ert_run):
    started = time.perf_counter()
    _, parts, test, _ = ert_run
    devs = [1.0] * 6
    orders = [list(range(6)), [5, 4, 3, 2, 1, 0], [2, 0, 4, 1, 5, 3]]
    aggs = [aggregate_wba([parts[i] for i in o], [devs[i] for i in o]) for o in orders]
    boxes = list(test.boxes())[:50]
    worst = 0.0
    errors = []
    for agg in aggs:
        placed = [localize_wba(rec.image, box.rect, agg) for rec, box in boxes]
        errors.append(round(float(np.mean([E.shape_error(p, box.shape_array(), box.rect)
                                           for p, (_, box) in zip(placed, boxes)])), 6))
        if agg is aggs[0]:
            ref = placed
        else:
            worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(placed, ref)))
    ok = len(boxes) == 50 and worst <= 1e-9 and len(set(errors)) == 1
    report(4, ok, f"3 orders on {len(boxes)} images, max coord diff {worst:.1e}, errors {errors}", started)


def _stub_forest(n_trees):
    level = E.CascadeLevel(np.zeros(2, dtype=np.intp), np.zeros((2, 2)),
                           np.zeros((n_trees, 15), dtype=np.intp), np.zeros((n_trees, 15), dtype=np.intp),
                           np.zeros((n_trees, 15)), np.zeros((n_trees, 16, 68, 2)))
    return E.ErtModel(np.zeros((68, 2)), [level])


def test_criterion_5_wba_structure():
    started = time.perf_counter()
    agg = aggregate_wba([_stub_forest(500) for _ in range(3)], [1.5, 1.0, 1.0])
    ok = agg.n_trees == 1500 and len(agg.subdivisions) == 3 and agg.total_deviation == 3.5
    report(5, ok, f"{agg.n_trees} trees in {len(agg.subdivisions)} subdivisions, "
                  f"total deviation {agg.total_deviation}", started)


def test_criterion_6_wba_accuracy_ordering(ert_run):
    started = time.perf_counter()
    result, _, _, elapsed = ert_run
    part_mean = float(np.mean([result.row(f"P{k}").metrics["mean_error"] for k in range(1, 7)]))
    com = result.row("COM(P1+P2+P3+P4+P5+P6)").metrics["mean_error"]
    pall = result.row("Pall").metrics["mean_error"]
    ok = com < part_mean and pall <= com
    report(6, ok, f"Pall {pall:.4f} <= COM {com:.4f} < mean part {part_mean:.4f}; "
                  f"experiment {elapsed:.0f}s", started)


def test_criterion_7_hog_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    feat_worst = 0.0
    for _ in range(100):
        img = rng.uniform(0, 255, (96, 96))
        feat_worst = max(feat_worst, float(np.abs(hog.extract_features(img) - oracles.features(img)).max()))
    score_worst = 0.0
    for _ in range(200):
        cy, cx = rng.integers(10, 16, size=2)
        feats = rng.normal(size=(cy, cx, 31))
        model = D.DetectorModel(rng.normal(size=(10, 10, 31)), float(rng.normal()))
        score_worst = max(score_worst, float(np.abs(D.score_map(feats, model)
                                                     - oracles.window_scores(feats, model.weights, model.bias)).max()))
    ok = feat_worst <= 1e-6 and score_worst <= 1e-9
    report(7, ok, f"features max diff {feat_worst:.1e}, score map max diff {score_worst:.1e}", started)


def test_criterion_8_ert_training_sanity():
    started = time.perf_counter()
    ds = generate_landmark_corpus(1, seed=13)
    params = E.ErtTrainParams(seed=13)
    model = E.train_ert(ds, params)
    twin = E.train_ert(ds, params)
    err = E.evaluate_ert(model, ds)
    errs = model.training_errors
    monotone = all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    same = serialize(model) == serialize(twin)
    ok = err < 1e-3 and monotone and same
    report(8, ok, f"single-image error {err:.2e}, non-increasing {monotone}, bit-identical {same}", started)


def test_criterion_9_ear_normalization():
    started = time.perf_counter()
    cases = [ebc.closure_percent(0.5, 0.0, 0.5) == 0.0, ebc.closure_percent(0.0, 0.0, 0.5) == 100.0,
             ebc.closure_percent(0.5, 0.1, 0.5) == 20.0]
    rng = np.random.default_rng(9)
    base = face_template_68(40.0) * 100
    ref = ebc.ear(base)
    worst = 0.0
    for _ in range(100):
        s, th = rng.uniform(0.2, 5.0), rng.uniform(-math.pi, math.pi)
        rot = s * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        worst = max(worst, abs(ebc.ear(base @ rot.T + rng.normal(0, 100, 2)) - ref))
    ok = all(cases) and worst <= 1e-9
    report(9, ok, f"substitution cases {cases}, EAR invariance max diff {worst:.1e}", started)


def test_criterion_10_pool_integrity(tmp_path):
    import http.client
    import threading

    started = time.perf_counter()
    server = serve(tmp_path / "pool", "127.0.0.1:0")
    try:
        rng = np.random.default_rng(10)
        blobs = [serialize(D.DetectorModel(rng.normal(size=(10, 10, 31)), float(k))) for k in range(8)]
        results, errors = {}, []

        def work(k):
            try:
                c = PoolClient(server.address)
                results[k] = c.pull_blob(c.push_blob(blobs[k], {"kind": "detector", "dataset_label": f"n{k}"}))
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        round_trip = not errors and all(results.get(k) == blobs[k] for k in range(8))

        client = PoolClient(server.address)
        eid = client.list()[0]["id"]
        path = server.store.blob_dir / f"{eid}.dmtm"
        data = bytearray(path.read_bytes())
        data[40] ^= 0x01
        path.write_bytes(bytes(data))
        try:
            client.pull(eid)
            tamper = False
        except IntegrityError:
            tamper = True

        import io
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(buf, format="PNG")
        png = buf.getvalue()
        host, port = server.address.split(":")
        statuses = []
        for method in ("POST", "PUT", "PATCH"):
            for route in ("/v1/models", f"/v1/models/{eid}", f"/v1/models/{eid}/meta", "/v1/images"):
                for ctype in ("image/png", "application/octet-stream"):
                    conn = http.client.HTTPConnection(host, int(port), timeout=10)
                    conn.request(method, route, body=png, headers={
                        "Content-Type": ctype, "X-DMT-Metadata": '{"kind": "detector", "dataset_label": "x"}'})
                    statuses.append(conn.getresponse().status)
                    conn.close()
        no_images = all(s >= 400 for s in statuses) and len(client.list()) == 8
    finally:
        server.stop()
    ok = round_trip and tamper and no_images
    report(10, ok, f"8-client round trips {round_trip}, tamper detected {tamper}, "
                   f"{len(statuses)} image uploads refused {no_images}", started)


def test_criterion_11_end_to_end_rehearsal(detector_run, ert_run):
    started = time.perf_counter()
    same = {}
    for kind, first in (("detector", detector_run[0]), ("ert", ert_run[0])):
        again = run_experiment(kind, seed=SEED)  # private pool this time
        same[kind] = again.to_csv() == first.to_csv()
        assert all(r.model_id for r in again.rows)
    labels = [r.label for r in ert_run[0].rows]
    ok = all(same.values()) and labels[0] == "P1" and "COM(P1+P2+P3+P4+P5+P6)" in labels
    report(11, ok, f"identical CSV across two seeded runs: {same}, {len(labels)} ERT rows, "
                   f"{len(detector_run[0].rows)} detector rows", started)
