"""Synthetic federated populations and CSV interchange.

The CSV layout is one row per sample with a header: ``client_id``, ``label``
and the feature columns in order.  Rows with ``client_id == -1`` form the
design pool.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Sample

POOL_CLIENT_ID = -1
GENERATORS = ("gaussian_blobs", "two_rings")


class DatasetFormatError(ValueError):
    pass


@dataclass
class SampleBatch:
    """Samples stored column-wise; ``ids`` are unique across a dataset."""
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.x.ndim != 2 or len(self.y) != len(self.x) or len(self.ids) != len(self.x):
            raise ValueError("inconsistent sample batch shapes")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Sample:
        return Sample(self.x[i], int(self.y[i]))

    def subset(self, idx) -> "SampleBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleBatch(self.x[idx], self.y[idx], self.ids[idx])


@dataclass
class ClientDataset:
    client_id: int
    data: SampleBatch

    def __len__(self):
        return len(self.data)


@dataclass
class FederatedDataset:
    clients: list
    design_pool: SampleBatch
    input_dim: int
    num_classes: int

    def all_client_samples(self) -> SampleBatch:
        return SampleBatch(np.concatenate([c.data.x for c in self.clients]),
                           np.concatenate([c.data.y for c in self.clients]),
                           np.concatenate([c.data.ids for c in self.clients]))


@dataclass
class PopulationConfig:
    num_clients: int = 1000
    samples_per_client: int = 1
    input_dim: int = 10
    num_classes: int = 4
    generator: str = "gaussian_blobs"
    class_separation: float = 3.0
    heterogeneity: float = math.inf
    pool_size: int = 512
    pool_shift: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_clients < 1 or self.samples_per_client < 1:
            raise ValueError("need at least one client with one sample")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if self.class_separation <= 0 or self.heterogeneity <= 0:
            raise ValueError("class_separation and heterogeneity must be positive")
        if self.pool_size < 0:
            raise ValueError("pool_size must be non-negative")
        if self.generator == "gaussian_blobs" and self.input_dim == 1 and self.num_classes > 2:
            raise ValueError("a 1-d sphere holds only two class means")


def _class_means(cfg, rng):
    if cfg.input_dim == 1:
        return np.array([[cfg.class_separation], [-cfg.class_separation]])[: cfg.num_classes]
    dirs = rng.normal(size=(cfg.num_classes, cfg.input_dim))
    return cfg.class_separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _draw(cfg, means, labels, rng):
    n = len(labels)
    if cfg.generator == "gaussian_blobs":
        return means[labels] + rng.normal(size=(n, cfg.input_dim))
    # concentric annuli: class c lives at radius in [(c + 0.5) s, (c + 1.5) s)
    dirs = rng.normal(size=(n, cfg.input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radius = cfg.class_separation * (labels + 0.5 + rng.uniform(size=n))
    return dirs * radius[:, None]


def generate(cfg: PopulationConfig) -> FederatedDataset:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xDA7A,)))
    means = _class_means(cfg, rng)
    C, N, n = cfg.num_classes, cfg.num_clients, cfg.samples_per_client
    if math.isinf(cfg.heterogeneity):
        labels = rng.integers(0, C, size=(N, n))
    else:
        props = rng.dirichlet(np.full(C, cfg.heterogeneity), size=N)
        cum = np.cumsum(props, axis=1)
        u = rng.uniform(size=(N, n))
        labels = np.minimum((u[:, :, None] > cum[:, None, :]).sum(axis=2), C - 1)
    labels = labels.ravel()
    X = _draw(cfg, means, labels, rng)
    clients = [ClientDataset(i, SampleBatch(X[i * n:(i + 1) * n], labels[i * n:(i + 1) * n],
                                            np.arange(i * n, (i + 1) * n)))
               for i in range(N)]
    pool_y = rng.integers(0, C, size=cfg.pool_size)
    pool_x = _draw(cfg, means, pool_y, rng)
    if cfg.pool_shift:
        pool_x = pool_x + cfg.pool_shift / math.sqrt(cfg.input_dim)
    pool = SampleBatch(pool_x, pool_y, N * n + np.arange(cfg.pool_size))
    return FederatedDataset(clients, pool, cfg.input_dim, C)


def export_csv(ds: FederatedDataset, path, label_col="label", client_col="client_id"):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([client_col, label_col] + [f"x{j}" for j in range(ds.input_dim)])
        for c in ds.clients:
            for x, y in zip(c.data.x, c.data.y):
                w.writerow([c.client_id, int(y)] + [repr(float(v)) for v in x])
        for x, y in zip(ds.design_pool.x, ds.design_pool.y):
            w.writerow([POOL_CLIENT_ID, int(y)] + [repr(float(v)) for v in x])


def ingest_csv(path, label_col="label", client_col="client_id", num_classes=None) -> FederatedDataset:
    """Read a federated dataset; sample ids follow row order."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        for col in (label_col, client_col):
            if col not in header:
                raise DatasetFormatError(f"{path}: missing column {col!r}")
        li, ci = header.index(label_col), header.index(client_col)
        feat = [j for j in range(len(header)) if j not in (li, ci)]
        if not feat:
            raise DatasetFormatError(f"{path}: no feature columns")
        rows_x, rows_y, rows_c = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = [float(row[j]) for j in feat]
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in x):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite feature value")
            try:
                y, c = int(row[li]), int(row[ci])
            except ValueError:
                raise DatasetFormatError(f"{path}:{lineno}: label and client_id must be integers") from None
            if y < 0 or (num_classes is not None and y >= num_classes):
                raise DatasetFormatError(f"{path}:{lineno}: unknown label {y}")
            if c < POOL_CLIENT_ID:
                raise DatasetFormatError(f"{path}:{lineno}: invalid client_id {c}")
            rows_x.append(x)
            rows_y.append(y)
            rows_c.append(c)
    X = np.array(rows_x, dtype=np.float64).reshape(-1, len(feat))
    Y = np.array(rows_y, dtype=np.int64)
    cid = np.array(rows_c, dtype=np.int64)
    ids = np.arange(len(Y))
    if num_classes is None:
        num_classes = max(2, int(Y.max()) + 1) if len(Y) else 2
    clients = []
    for c in sorted(set(rows_c) - {POOL_CLIENT_ID}):
        sel = np.flatnonzero(cid == c)
        clients.append(ClientDataset(int(c), SampleBatch(X[sel], Y[sel], ids[sel])))
    sel = np.flatnonzero(cid == POOL_CLIENT_ID)
    pool = SampleBatch(X[sel], Y[sel], ids[sel])
    return FederatedDataset(clients, pool, len(feat), num_classes)
