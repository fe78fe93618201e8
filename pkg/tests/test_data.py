import math

import numpy as np
import pytest

from fedaudit.data import (POOL_CLIENT_ID, DatasetFormatError, PopulationConfig, export_csv,
                           generate, ingest_csv)


def all_ids(ds):
    return np.concatenate([c.data.ids for c in ds.clients]), ds.design_pool.ids


def test_iid_two_class_balance_per_client():
    ds = generate(PopulationConfig(num_clients=50, samples_per_client=400, num_classes=2, seed=3))
    se = math.sqrt(0.25 / 400)
    for c in ds.clients:
        assert abs(c.data.y.mean() - 0.5) < 3 * se


def test_single_sample_clients():
    ds = generate(PopulationConfig(num_clients=30, samples_per_client=1))
    assert len(ds.clients) == 30
    assert all(len(c) == 1 for c in ds.clients)
    assert [c.client_id for c in ds.clients] == list(range(30))


@pytest.mark.parametrize("gen", ["gaussian_blobs", "two_rings"])
def test_same_seed_is_bit_identical(gen):
    cfg = PopulationConfig(num_clients=20, samples_per_client=3, generator=gen, heterogeneity=0.5, seed=9)
    a, b = generate(cfg), generate(cfg)
    for ca, cb in zip(a.clients, b.clients):
        assert np.array_equal(ca.data.x, cb.data.x) and np.array_equal(ca.data.y, cb.data.y)
    assert np.array_equal(a.design_pool.x, b.design_pool.x)
    c = generate(PopulationConfig(num_clients=20, samples_per_client=3, generator=gen,
                                  heterogeneity=0.5, seed=10))
    assert not np.array_equal(a.clients[0].data.x, c.clients[0].data.x)


@pytest.mark.parametrize("gen", ["gaussian_blobs", "two_rings"])
def test_pool_disjoint_from_clients(gen):
    ds = generate(PopulationConfig(num_clients=40, samples_per_client=2, pool_size=25, generator=gen))
    cid, pid = all_ids(ds)
    assert len(set(cid)) == len(cid) and len(set(pid)) == len(pid) == 25
    assert not set(cid) & set(pid)


def test_global_label_balance():
    ds = generate(PopulationConfig(num_clients=5000, samples_per_client=4, num_classes=5, seed=1))
    y = np.concatenate([c.data.y for c in ds.clients])
    freq = np.bincount(y, minlength=5) / len(y)
    assert np.all(np.abs(freq - 0.2) < 0.02)


def _label_variance(gamma, seed):
    ds = generate(PopulationConfig(num_clients=200, samples_per_client=20, num_classes=4,
                                   heterogeneity=gamma, pool_size=0, seed=seed))
    P = np.array([np.bincount(c.data.y, minlength=4) / len(c) for c in ds.clients])
    return float(P.var(axis=0).mean())


def test_dirichlet_heterogeneity_increases_label_variance():
    v = [np.mean([_label_variance(g, s) for s in range(10)]) for g in (100.0, 1.0, 0.1)]
    assert v[0] < v[1] < v[2]


def test_class_means_on_sphere_and_rings():
    ds = generate(PopulationConfig(num_clients=2000, input_dim=6, num_classes=3, class_separation=5.0,
                                   pool_size=0, seed=2))
    X = np.concatenate([c.data.x for c in ds.clients])
    Y = np.concatenate([c.data.y for c in ds.clients])
    for k in range(3):
        assert abs(np.linalg.norm(X[Y == k].mean(axis=0)) - 5.0) < 0.3
    rings = generate(PopulationConfig(num_clients=500, input_dim=3, num_classes=3, generator="two_rings",
                                      class_separation=2.0, pool_size=0))
    for c in rings.clients:
        r = np.linalg.norm(c.data.x[0])
        k = c.data.y[0]
        assert 2.0 * (k + 0.5) <= r < 2.0 * (k + 1.5)


def test_pool_shift_moves_pool_mean():
    base = PopulationConfig(num_clients=10, input_dim=4, pool_size=4000, seed=5)
    a = generate(base)
    b = generate(PopulationConfig(**{**base.__dict__, "pool_shift": 2.0}))
    np.testing.assert_allclose(b.design_pool.x - a.design_pool.x, 1.0, atol=1e-12)


@pytest.mark.parametrize("bad", [
    dict(num_clients=0), dict(samples_per_client=0), dict(generator="moons"), dict(num_classes=1),
    dict(class_separation=0.0), dict(heterogeneity=0.0), dict(pool_size=-1),
    dict(input_dim=1, num_classes=3),
])
def test_infeasible_configs(bad):
    with pytest.raises(ValueError):
        generate(PopulationConfig(**bad))


def test_ingest_grouping(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("client_id,label,f0,f1\n0,1,0.5,1.5\n0,0,-1,2\n-1,1,3,4\n")
    ds = ingest_csv(p)
    assert len(ds.clients) == 1 and len(ds.clients[0]) == 2
    assert len(ds.design_pool) == 1
    assert ds.input_dim == 2 and ds.num_classes == 2
    np.testing.assert_array_equal(ds.design_pool.x, [[3.0, 4.0]])


@pytest.mark.parametrize("body,needle", [
    ("client_id,label,f0\n0,1,abc\n", ":2:"),
    ("client_id,label,f0\n0,1,1.0\n0,1\n", ":3:"),
    ("client_id,label,f0\n0,x,1.0\n", ":2:"),
    ("client_id,label,f0\n0,1,nan\n", ":2:"),
    ("client_id,label,f0\n-2,1,1.0\n", ":2:"),
    ("client_id,f0\n0,1.0\n", "label"),
    ("", "header"),
])
def test_ingest_errors_name_the_line(tmp_path, body, needle):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DatasetFormatError, match=needle):
        ingest_csv(p)


def test_ingest_unknown_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("client_id,label,f0\n0,5,1.0\n")
    with pytest.raises(DatasetFormatError, match="unknown label"):
        ingest_csv(p, num_classes=3)


def test_custom_column_names(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,who,cls,b\n1.0,3,0,2.0\n")
    ds = ingest_csv(p, label_col="cls", client_col="who")
    assert ds.clients[0].client_id == 3
    np.testing.assert_array_equal(ds.clients[0].data.x, [[1.0, 2.0]])


@pytest.mark.parametrize("gen", ["gaussian_blobs", "two_rings"])
def test_export_ingest_round_trip(tmp_path, gen):
    ds = generate(PopulationConfig(num_clients=15, samples_per_client=3, input_dim=5, num_classes=3,
                                   pool_size=7, generator=gen, heterogeneity=1.0, seed=4))
    p = tmp_path / "rt.csv"
    export_csv(ds, p)
    back = ingest_csv(p, num_classes=3)
    assert back.input_dim == 5 and back.num_classes == 3
    assert [c.client_id for c in back.clients] == [c.client_id for c in ds.clients]
    for a, b in zip(ds.clients, back.clients):
        assert np.array_equal(a.data.x, b.data.x)
        assert np.array_equal(a.data.y, b.data.y)
        assert np.array_equal(a.data.ids, b.data.ids)
    assert np.array_equal(ds.design_pool.x, back.design_pool.x)
    assert np.array_equal(ds.design_pool.ids, back.design_pool.ids)
    assert POOL_CLIENT_ID == -1
