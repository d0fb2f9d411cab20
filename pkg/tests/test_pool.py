import hashlib
import http.client
import io
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st
from PIL import Image

from dmt import ert as E
from dmt.detector import DetectorModel
from dmt.errors import (BlobFormatError, IncompatibleModelsError, IntegrityError, NotFoundError,
                        PoolConnectionError, PoolStartupError, PoolValidationError)
from dmt.hog import HogConfig
from dmt.pool import PoolClient, aggregate_from_pool, serve
from dmt.pool.blob import content_id, deserialize, serialize
from dmt.pool.server import ROUTES
from dmt.synth import generate_landmark_corpus
from dmt.wba import aggregate_wba


def _detector(seed=0):
    rng = np.random.default_rng(seed)
    return DetectorModel(rng.normal(size=(10, 10, 31)), float(rng.normal()),
                         detection_threshold=float(rng.normal()))


@pytest.fixture(scope="module")
def ert_models():
    ds = generate_landmark_corpus(24, seed=3)
    out = []
    for k in range(6):
        params = E.ErtTrainParams(oversampling=2, cascades=2, trees_per_cascade=4, feature_pool_size=20, seed=k)
        out.append(E.train_ert(ds.subset(range(4 * k, 4 * k + 4)), params))
    return out


@pytest.fixture
def pool(tmp_path):
    server = serve(tmp_path / "pool", "127.0.0.1:0")
    yield server, PoolClient(server.address)
    server.stop()


def _png_bytes():
    buf = io.BytesIO()
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


# ----------------------------------------------------------------------- blob format


def test_detector_blob_round_trip():
    m = DetectorModel(np.random.default_rng(1).normal(size=(10, 10, 31)), -0.25,
                      extractor_config=HogConfig(truncation=0.3), detection_threshold=0.1)
    blob = serialize(m)
    assert blob[:4] == b"DMTM"
    back = deserialize(blob)
    np.testing.assert_array_equal(back.weights, m.weights)
    assert (back.bias, back.detection_threshold, back.extractor_config) == (m.bias, 0.1, m.extractor_config)
    assert serialize(back) == blob


@given(arrays(np.float64, (10, 10, 31), elements=st.floats(allow_nan=False, allow_infinity=False)),
       st.floats(allow_nan=False, allow_infinity=False))
@settings(max_examples=25, deadline=None)
def test_detector_blob_bit_exact(w, b):
    m = DetectorModel(w, b)
    back = deserialize(serialize(m))
    assert back.weights.tobytes() == m.weights.tobytes()
    assert np.float64(back.bias).tobytes() == np.float64(b).tobytes()


def test_ert_blob_round_trip(ert_models):
    m = ert_models[0]
    back = deserialize(serialize(m))
    np.testing.assert_array_equal(back.init_shape, m.init_shape)
    for a, b in zip(back.cascades, m.cascades):
        for name in ("anchor_landmark", "anchor_offset", "split_a", "split_b", "thresholds", "leaves"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    img = generate_landmark_corpus(1, seed=50).images[0].image
    np.testing.assert_array_equal(E.localize(img, (8, 8, 48, 48), back), E.localize(img, (8, 8, 48, 48), m))


def test_aggregated_blob_round_trip(ert_models):
    agg = aggregate_wba(ert_models[:3], [1.5, 1.0, 1.0])
    blob = serialize(agg)
    back = deserialize(blob)
    assert back.deviations == [1.5, 1.0, 1.0]
    assert back.n_trees == agg.n_trees
    assert serialize(back) == blob


@pytest.mark.parametrize("mutate", [
    lambda b: b[:10],
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:8] + (9).to_bytes(4, "little") + b[12:],
    lambda b: b + b"\0" * 8,
])
def test_malformed_blobs(mutate):
    with pytest.raises(BlobFormatError):
        deserialize(mutate(serialize(_detector())))


# ----------------------------------------------------------------------- service


def test_push_pull_list(pool):
    _, client = pool
    m = _detector()
    eid = client.push(m, {"dataset_label": "LFW-P1", "metrics": {"recall": 0.9, "precision": 1.0}})
    assert eid == hashlib.sha256(serialize(m)).hexdigest()
    listed = client.list()
    assert [e["id"] for e in listed] == [eid]
    entry = listed[0]
    assert entry["kind"] == "detector" and entry["window"] == 80
    assert entry["metrics"] == {"recall": 0.9, "precision": 1.0}
    assert entry["created_at"].endswith("Z")
    assert client.pull_blob(eid) == serialize(m)
    model, meta = client.pull(eid)
    np.testing.assert_array_equal(model.weights, m.weights)
    assert meta == entry


def test_restart_keeps_entries(tmp_path):
    root = tmp_path / "pool"
    server = serve(root, "127.0.0.1:0")
    eid = PoolClient(server.address).push(_detector(), {"dataset_label": "P1"})
    server.stop()
    server = serve(root, "127.0.0.1:0")
    try:
        assert [e["id"] for e in PoolClient(server.address).list()] == [eid]
    finally:
        server.stop()


def test_port_in_use(pool, tmp_path):
    server, _ = pool
    with pytest.raises(PoolStartupError):
        serve(tmp_path / "other", server.address)


def test_unreachable_pool():
    with pytest.raises(PoolConnectionError):
        PoolClient("127.0.0.1:1", timeout=2).list()


def test_env_address(pool, monkeypatch):
    server, _ = pool
    monkeypatch.setenv("DMT_POOL_ADDR", server.address)
    assert PoolClient().list() == []


def test_concurrent_identical_pushes(pool):
    server, _ = pool
    blob = serialize(_detector())
    ids, errors = [], []
    barrier = threading.Barrier(2)

    def push():
        try:
            barrier.wait()
            ids.append(PoolClient(server.address).push_blob(blob, {"kind": "detector", "dataset_label": "x"}))
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=push) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert ids[0] == ids[1] == content_id(blob)
    assert len(PoolClient(server.address).list()) == 1
    assert len(list((server.store.blob_dir).glob("*.dmtm"))) == 1


def test_eight_concurrent_clients(pool):
    server, _ = pool
    blobs = [serialize(_detector(100 + k)) for k in range(8)]
    results, errors = {}, []

    def work(k):
        try:
            c = PoolClient(server.address)
            for _ in range(3):
                eid = c.push_blob(blobs[k], {"kind": "detector", "dataset_label": f"node{k}"})
                results[k] = c.pull_blob(eid)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert all(results[k] == blobs[k] for k in range(8))
    ids = [e["id"] for e in PoolClient(server.address).list()]
    assert sorted(ids) == sorted(content_id(b) for b in blobs)


def test_wrong_kind_rejected(pool):
    _, client = pool
    with pytest.raises(PoolValidationError):
        client.push_blob(serialize(_detector()), {"kind": "ert", "dataset_label": "x"})
    assert client.list() == []


def test_missing_label_rejected(pool):
    _, client = pool
    with pytest.raises(PoolValidationError):
        client.push_blob(serialize(_detector()), {"kind": "detector"})


def test_window_mismatch_rejected(pool):
    _, client = pool
    with pytest.raises(PoolValidationError):
        client.push(_detector(), {"dataset_label": "x", "window": 64})


def test_unknown_id(pool):
    _, client = pool
    with pytest.raises(NotFoundError):
        client.pull("0" * 64)
    with pytest.raises(NotFoundError):
        client.meta("f" * 64)


def test_list_filters(pool, ert_models):
    _, client = pool
    d = client.push(_detector(), {"dataset_label": "LFW-P1"})
    e = client.push(ert_models[0], {"dataset_label": "iBUG-P1"})
    assert [x["id"] for x in client.list(kind="detector")] == [d]
    assert [x["id"] for x in client.list(kind="ert")] == [e]
    assert [x["id"] for x in client.list(label="iBUG")] == [e]
    assert client.list(label="nothing") == []


def test_tampered_blob(pool):
    server, client = pool
    eid = client.push(_detector(), {"dataset_label": "x"})
    path = server.store.blob_dir / f"{eid}.dmtm"
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        client.pull(eid)


def test_partial_entries_invisible(tmp_path):
    root = tmp_path / "pool"
    server = serve(root, "127.0.0.1:0")
    server.stop()
    blob = serialize(_detector())
    (root / "blobs" / f"{content_id(blob)}.dmtm").write_bytes(blob)  # no sidecar yet
    (root / "meta" / ".tmp-abc").write_text("{")
    server = serve(root, "127.0.0.1:0")
    try:
        assert PoolClient(server.address).list() == []
    finally:
        server.stop()


def _raw(server, method, path, body=None, headers=None):
    host, port = server.address.split(":")
    conn = http.client.HTTPConnection(host, int(port), timeout=10)
    conn.request(method, path, body=body, headers=headers or {})
    resp = conn.getresponse()
    data = resp.read()
    conn.close()
    return resp.status, data


def test_no_endpoint_accepts_images(pool):
    server, client = pool
    png = _png_bytes()
    meta = json.dumps({"kind": "detector", "dataset_label": "x"})
    eid = "a" * 64
    paths = ["/v1/models", f"/v1/models/{eid}", f"/v1/models/{eid}/meta", "/v1/images", "/"]
    for method in ("POST", "PUT", "PATCH"):
        for path in paths:
            for ctype in ("image/png", "application/octet-stream"):
                status, _ = _raw(server, method, path, png, {"Content-Type": ctype, "X-DMT-Metadata": meta})
                assert status >= 400, (method, path, ctype)
    assert client.list() == []


def test_route_surface():
    assert [m for m, _ in ROUTES].count("POST") == 1
    assert ("POST", "/v1/models") in ROUTES
    assert not any(m in ("PUT", "DELETE", "PATCH") for m, _ in ROUTES)


def test_unknown_routes(pool):
    server, _ = pool
    assert _raw(server, "GET", "/v2/models")[0] == 404
    assert _raw(server, "GET", "/v1/models/not-an-id")[0] == 404
    assert _raw(server, "DELETE", "/v1/models")[0] == 405


def test_ids_do_not_collide(pool, ert_models):
    _, client = pool
    ids = [client.push(_detector(k), {"dataset_label": f"d{k}"}) for k in range(10)]
    ids += [client.push(m, {"dataset_label": f"e{k}"}) for k, m in enumerate(ert_models)]
    assert len(set(ids)) == len(ids) == len(client.list())


# ----------------------------------------------------------------------- aggregation from the pool


def test_aggregate_six_detectors(pool):
    _, client = pool
    models = [_detector(k) for k in range(6)]
    ids = [client.push(m, {"dataset_label": f"P{k + 1}"}) for k, m in enumerate(models)]
    result = aggregate_from_pool(client, ids, "detector", {"push": True})
    assert result.metadata["sources"] == ids
    assert result.metadata["dataset_label"] == "COM(P1+P2+P3+P4+P5+P6)"
    np.testing.assert_allclose(result.model.weights, np.mean([m.weights for m in models], axis=0), atol=1e-12)
    assert client.meta(result.id)["sources"] == ids


def test_aggregate_single_id_is_identity(pool):
    _, client = pool
    m = _detector(3)
    eid = client.push(m, {"dataset_label": "P1"})
    result = aggregate_from_pool(client, [eid])
    assert serialize(result.model) == serialize(m)


def test_aggregate_ert_with_deviations(pool, ert_models):
    _, client = pool
    ids = [client.push(m, {"dataset_label": f"P{k + 1}"}) for k, m in enumerate(ert_models)]
    result = aggregate_from_pool(client, ids, "ert", {"deviations": [2, 1, 1, 1, 1, 1], "push": True})
    assert result.model.total_deviation == 7.0
    assert client.meta(result.id)["kind"] == "ert-aggregated"
    with pytest.raises(IncompatibleModelsError):
        aggregate_from_pool(client, [result.id])


def test_aggregate_mixed_kinds(pool, ert_models):
    _, client = pool
    a = client.push(_detector(), {"dataset_label": "d"})
    b = client.push(ert_models[0], {"dataset_label": "e"})
    with pytest.raises(IncompatibleModelsError):
        aggregate_from_pool(client, [a, b])
    with pytest.raises(IncompatibleModelsError):
        aggregate_from_pool(client, [a], kind="ert")
