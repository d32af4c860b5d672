"""Dataset ingestion and persistence, gene-panel selection, the augmented
batch sampler, and the synthetic benchmark with closed-form oracles."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, OracleError, ParameterError, SelectionError
from .model import GenePanel
from .numerics import RngStream

DIHEDRAL_TAGS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270",
                 "transpose", "transverse")

EMB_MAGIC = b"STEMEMB1"


@dataclass
class SpotRecord:
    spot_id: str
    slide_id: str
    counts: np.ndarray  # (C_raw,) nonnegative, raw or log per the dataset flag
    embeddings: list    # [(transform_tag, np.ndarray float32)]
    xy: tuple | None = None
    patch_size_px: int | None = None

    def embedding(self, tag: str = "identity") -> np.ndarray:
        for t, v in self.embeddings:
            if t == tag:
                return v
        raise ParameterError(f"spot {self.spot_id} has no embedding tagged {tag!r}")

    def validate(self, cond_dim: int, raw_counts: bool = True):
        tags = [t for t, _ in self.embeddings]
        if "identity" not in tags:
            raise FormatError(f"spot {self.spot_id} lacks an identity embedding")
        for t, v in self.embeddings:
            if t not in DIHEDRAL_TAGS:
                raise FormatError(f"spot {self.spot_id}: unknown transform tag {t!r}")
            if len(v) != cond_dim:
                raise FormatError(f"spot {self.spot_id}: embedding length {len(v)} != {cond_dim}")
        if not np.isfinite(self.counts).all():
            raise FormatError(f"spot {self.spot_id}: counts must be finite")
        if raw_counts and np.any(self.counts < 0):
            raise FormatError(f"spot {self.spot_id}: raw counts must be nonnegative")


@dataclass
class Dataset:
    records: list
    panel: GenePanel          # the gene columns of counts.csv, in order
    cond_dim: int
    log_transformed: bool
    split: dict = field(default_factory=dict)  # slide_id -> "train" | "test"

    def split_of(self, slide_id: str) -> str:
        return self.split.get(slide_id, "train")

    def train_records(self):
        return [r for r in self.records if self.split_of(r.slide_id) == "train"]

    def test_records(self):
        return [r for r in self.records if self.split_of(r.slide_id) == "test"]

    def validate(self):
        for r in self.records:
            r.validate(self.cond_dim, raw_counts=not self.log_transformed)
            if len(r.counts) != len(self.panel):
                raise FormatError(f"spot {r.spot_id}: {len(r.counts)} counts for "
                                  f"{len(self.panel)} genes")


def log_transform(counts) -> np.ndarray:
    """y = ln(1 + x), per entry."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ParameterError("log_transform requires nonnegative counts")
    return np.log1p(counts)


def log_matrix(dataset: Dataset, records=None) -> np.ndarray:
    """Stacked log-space count matrix for the given records (default: all)."""
    records = dataset.records if records is None else records
    m = np.stack([r.counts for r in records]) if records else np.zeros((0, len(dataset.panel)))
    return m.astype(np.float64) if dataset.log_transformed else log_transform(m)


def project_to_panel(dataset: Dataset, matrix: np.ndarray, panel: GenePanel) -> np.ndarray:
    """Reorder/select gene columns to match the target panel."""
    index = {name: i for i, name in enumerate(dataset.panel.names)}
    try:
        cols = [index[name] for name in panel.names]
    except KeyError as exc:
        raise SelectionError(f"panel gene {exc.args[0]!r} not present in dataset") from None
    return matrix[:, cols]


# ---------------------------------------------------------------------------
# gene-panel selection


def _ranked(names, key_values):
    """Gene names sorted by descending value; ties by ascending name."""
    order = sorted(range(len(names)), key=lambda i: (-key_values[i], names[i]))
    return [names[i] for i in order]


def select_hmhvg(count_matrix: np.ndarray, names, k: int) -> GenePanel:
    """High-mean/high-variance panel: grow N until the top-N-by-mean and
    top-N-by-variance sets intersect in at least k genes, then keep the k
    of highest variance, ordered by descending variance."""
    count_matrix = np.asarray(count_matrix, dtype=np.float64)
    names = list(names)
    if k > len(names):
        raise SelectionError(f"k={k} exceeds gene count {len(names)}")
    means = count_matrix.mean(axis=0)
    variances = count_matrix.var(axis=0)
    by_mean = _ranked(names, means)
    by_var = _ranked(names, variances)
    var_of = dict(zip(names, variances))
    for n in range(k, len(names) + 1):
        inter = set(by_mean[:n]) & set(by_var[:n])
        if len(inter) >= k:
            chosen = sorted(inter, key=lambda g: (-var_of[g], g))[:k]
            return GenePanel(tuple(chosen), kind="hmhvg")
    raise SelectionError(f"cannot find {k} genes in the mean/variance intersection")


def select_hvg(count_matrix: np.ndarray, names, k: int) -> GenePanel:
    """High-variance pool of size min(4k, all), then the k of highest mean,
    ordered by descending mean."""
    count_matrix = np.asarray(count_matrix, dtype=np.float64)
    names = list(names)
    if k > len(names):
        raise SelectionError(f"k={k} exceeds gene count {len(names)}")
    means = count_matrix.mean(axis=0)
    variances = count_matrix.var(axis=0)
    pool = _ranked(names, variances)[: min(4 * k, len(names))]
    mean_of = dict(zip(names, means))
    chosen = sorted(pool, key=lambda g: (-mean_of[g], g))[:k]
    return GenePanel(tuple(chosen), kind="hvg")


# ---------------------------------------------------------------------------
# augmented batch sampling


class SamplingPlan:
    """Uniform-with-replacement batch sampler over training records.

    Draws (log-count vector, condition embedding) pairs so the expected
    identity:non-identity embedding ratio is ratio_original:ratio_augmented;
    non-identity tags are chosen uniformly among those a record carries.
    """

    def __init__(self, x_log: np.ndarray, identity_emb: np.ndarray, aug_embs: list,
                 ratio_original: int, ratio_augmented: int):
        self.x_log = np.asarray(x_log, dtype=np.float32)
        self.identity_emb = np.asarray(identity_emb, dtype=np.float32)
        self.aug_embs = aug_embs  # per record: list of float32 arrays (may be empty)
        total = ratio_original + ratio_augmented
        self.p_identity = ratio_original / total
        self.n = len(self.x_log)

    def draw(self, rng: RngStream, batch_size: int):
        idx = rng.integers(0, self.n, size=batch_size)
        u = rng.uniform(size=batch_size)
        tag_pick = rng.uniform(size=batch_size)
        e = np.empty((batch_size, self.identity_emb.shape[1]), dtype=np.float32)
        for j, i in enumerate(idx):
            augs = self.aug_embs[i]
            if u[j] < self.p_identity or not augs:
                e[j] = self.identity_emb[i]
            else:
                e[j] = augs[int(tag_pick[j] * len(augs)) % len(augs)]
        return self.x_log[idx], e


def expand_augmented(dataset: Dataset, ratio_original: int, ratio_augmented: int,
                     panel: GenePanel | None = None) -> SamplingPlan:
    if ratio_original <= 0 or ratio_augmented < 0:
        raise ParameterError("ratios must be positive (augmented may be zero)")
    records = dataset.train_records()
    if not records:
        raise ParameterError("no training records in dataset")
    x = log_matrix(dataset, records)
    if panel is not None:
        x = project_to_panel(dataset, x, panel)
    identity = np.stack([r.embedding("identity") for r in records])
    aug_embs = []
    missing = 0
    for r in records:
        augs = [v for t, v in r.embeddings if t != "identity"]
        if ratio_augmented > 0 and not augs:
            missing += 1
        aug_embs.append(augs)
    if missing:
        warnings.warn(f"{missing} training records carry only identity embeddings; "
                      "they contribute identity draws only")
    return SamplingPlan(x, identity, aug_embs, ratio_original, ratio_augmented)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticSpec:
    """Mixture of identifiable clusters with diagonal-Gaussian gene profiles
    in log space; per-condition mean/variance are known in closed form."""

    K: int
    cond_dim: int
    C: int
    centers: np.ndarray          # (K, cond_dim)
    tau: float
    gene_log_means: np.ndarray   # (K, C)
    gene_log_stds: np.ndarray    # (K, C)
    train_spots_per_cluster: int
    test_spots_per_cluster: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.gene_log_means = np.asarray(self.gene_log_means, dtype=np.float64)
        self.gene_log_stds = np.asarray(self.gene_log_stds, dtype=np.float64)
        if self.centers.shape != (self.K, self.cond_dim):
            raise ParameterError("centers shape mismatch")
        if self.gene_log_means.shape != (self.K, self.C):
            raise ParameterError("gene_log_means shape mismatch")
        if self.gene_log_stds.shape != (self.K, self.C):
            raise ParameterError("gene_log_stds shape mismatch")
        if np.any(self.gene_log_stds < 0):
            raise ParameterError("gene_log_stds must be nonnegative")
        for a in range(self.K):
            for b in range(a + 1, self.K):
                d = np.linalg.norm(self.centers[a] - self.centers[b])
                if d <= 4.0 * self.tau:
                    raise ParameterError(
                        f"clusters {a},{b} are {d:.3g} apart; need > 4*tau = {4 * self.tau:.3g}")

    def to_json(self) -> dict:
        return {
            "K": self.K, "cond_dim": self.cond_dim, "C": self.C,
            "centers": self.centers.tolist(), "tau": self.tau,
            "gene_log_means": self.gene_log_means.tolist(),
            "gene_log_stds": self.gene_log_stds.tolist(),
            "train_spots_per_cluster": self.train_spots_per_cluster,
            "test_spots_per_cluster": self.test_spots_per_cluster,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        try:
            return cls(K=int(doc["K"]), cond_dim=int(doc["cond_dim"]), C=int(doc["C"]),
                       centers=doc["centers"], tau=float(doc["tau"]),
                       gene_log_means=doc["gene_log_means"],
                       gene_log_stds=doc["gene_log_stds"],
                       train_spots_per_cluster=int(doc["train_spots_per_cluster"]),
                       test_spots_per_cluster=int(doc.get("test_spots_per_cluster", 0)))
        except KeyError as exc:
            raise FormatError(f"synthetic spec missing field {exc.args[0]!r}") from None


def random_synthetic_spec(K: int, cond_dim: int, C: int, tau: float,
                          train_spots_per_cluster: int, test_spots_per_cluster: int,
                          seed: int, center_scale: float = 4.0,
                          mean_spacing: float = 0.7) -> SyntheticSpec:
    """Convenience constructor: axis-aligned centers and random gene profiles.

    Per gene, cluster log-means are a shuffled evenly spaced ladder on top of
    a random base level, so every gene separates the clusters.
    """
    if K > cond_dim:
        raise ParameterError("need cond_dim >= K for axis-aligned centers")
    rng = RngStream(seed, stream_id=77)
    centers = np.zeros((K, cond_dim))
    for k in range(K):
        centers[k, k] = center_scale
    base = 0.5 + rng.uniform(size=C)
    ladder = mean_spacing * np.arange(K, dtype=np.float64)
    perm_keys = rng.uniform(size=(C, K))
    means = np.empty((K, C))
    for j in range(C):
        means[:, j] = base[j] + ladder[np.argsort(perm_keys[j])]
    stds = 0.15 + 0.2 * rng.uniform(size=(K, C))
    return SyntheticSpec(K, cond_dim, C, centers, tau, means, stds,
                         train_spots_per_cluster, test_spots_per_cluster)


def _bounded_normal(rng: RngStream, dim: int) -> np.ndarray:
    """Standard normal vector resampled to norm < 4, keeping every condition
    inside its cluster's identifiability radius (4 * tau after scaling)."""
    n = rng.standard_normal(dim, np.float64)
    while np.linalg.norm(n) >= 4.0:
        n = rng.standard_normal(dim, np.float64)
    return n


def make_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Sample a dataset from the spec: per spot, e = center + tau*N(0,I)
    (norm-truncated at the 4*tau identifiability radius) and log-profile
    x = m_k + s_k * N(0,I); identity embeddings only."""
    rng = RngStream(seed, stream_id=1)
    panel = GenePanel(tuple(f"gene{i:04d}" for i in range(spec.C)), kind="custom")
    records = []
    for part, slide, count in (("train", "slide_train", spec.train_spots_per_cluster),
                               ("test", "slide_test", spec.test_spots_per_cluster)):
        for k in range(spec.K):
            for i in range(count):
                e = spec.centers[k] + spec.tau * _bounded_normal(rng, spec.cond_dim)
                x = spec.gene_log_means[k] + spec.gene_log_stds[k] * \
                    rng.standard_normal(spec.C, np.float64)
                records.append(SpotRecord(
                    spot_id=f"c{k}_{part}{i:05d}", slide_id=slide,
                    counts=x, embeddings=[("identity", e.astype(np.float32))]))
    split = {"slide_train": "train", "slide_test": "test"}
    return Dataset(records=records, panel=panel, cond_dim=spec.cond_dim,
                   log_transformed=True, split=split)


def oracle_conditional_stats(spec: SyntheticSpec, e) -> tuple:
    """Closed-form conditional (mean, variance) of the nearest cluster."""
    e = np.asarray(e, dtype=np.float64)
    d = np.linalg.norm(spec.centers - e[None, :], axis=1)
    radius = max(4.0 * spec.tau, 1e-9)
    within = np.flatnonzero(d <= radius)
    if within.size == 0:
        raise OracleError(f"no cluster within {radius:.3g} of the query condition")
    order = np.argsort(d)
    if spec.K > 1 and np.isclose(d[order[0]], d[order[1]]):
        raise OracleError("query condition is equidistant to two cluster centers")
    k = int(order[0])
    return spec.gene_log_means[k].copy(), spec.gene_log_stds[k] ** 2


# ---------------------------------------------------------------------------
# on-disk format


def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: str, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_dataset(dataset: Dataset, out_dir: str):
    """Persist the dataset directory: meta.json, counts.csv, embeddings.bin."""
    dataset.validate()
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "format_version": 1,
        "panel": list(dataset.panel.names),
        "panel_kind": dataset.panel.kind,
        "cond_dim": dataset.cond_dim,
        "log_transformed": dataset.log_transformed,
        "split": dict(sorted(dataset.split.items())),
    }
    _atomic_write(os.path.join(out_dir, "meta.json"),
                  (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["spot_id", "slide_id", *dataset.panel.names])
    for r in dataset.records:
        writer.writerow([r.spot_id, r.slide_id, *(_fmt(x) for x in r.counts)])
    _atomic_write(os.path.join(out_dir, "counts.csv"), buf.getvalue().encode())

    blob = io.BytesIO()
    n_entries = sum(len(r.embeddings) for r in dataset.records)
    blob.write(EMB_MAGIC)
    blob.write(struct.pack("<II", n_entries, dataset.cond_dim))
    for i, r in enumerate(dataset.records):
        for tag, vec in r.embeddings:
            tag_b = tag.encode()
            blob.write(struct.pack("<H", len(tag_b)))
            blob.write(tag_b)
            blob.write(struct.pack("<I", i))
            blob.write(np.asarray(vec, dtype="<f4").tobytes())
    _atomic_write(os.path.join(out_dir, "embeddings.bin"), blob.getvalue())


def load_dataset(path: str) -> Dataset:
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path, "rb") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {meta_path}: {exc}") from None
    if meta.get("format_version") != 1:
        raise FormatError(f"unsupported dataset format version {meta.get('format_version')}")
    panel = GenePanel(tuple(meta["panel"]), kind=meta.get("panel_kind", "custom"))
    cond_dim = int(meta["cond_dim"])

    records = []
    with open(os.path.join(path, "counts.csv"), newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["spot_id", "slide_id"] or tuple(header[2:]) != panel.names:
            raise FormatError("counts.csv header does not match meta.json panel")
        for row in reader:
            counts = np.array([float(x) for x in row[2:]], dtype=np.float64)
            records.append(SpotRecord(spot_id=row[0], slide_id=row[1],
                                      counts=counts, embeddings=[]))

    with open(os.path.join(path, "embeddings.bin"), "rb") as f:
        raw = f.read()
    if raw[:8] != EMB_MAGIC:
        raise FormatError("embeddings.bin: bad magic")
    n_entries, file_cond = struct.unpack_from("<II", raw, 8)
    if file_cond != cond_dim:
        raise FormatError(f"embeddings.bin cond_dim {file_cond} != meta {cond_dim}")
    off = 16
    for _ in range(n_entries):
        (tag_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        tag = raw[off:off + tag_len].decode()
        off += tag_len
        (spot_idx,) = struct.unpack_from("<I", raw, off)
        off += 4
        vec = np.frombuffer(raw, dtype="<f4", count=cond_dim, offset=off).copy()
        off += 4 * cond_dim
        if spot_idx >= len(records):
            raise FormatError(f"embeddings.bin references spot index {spot_idx}")
        records[spot_idx].embeddings.append((tag, vec))

    ds = Dataset(records=records, panel=panel, cond_dim=cond_dim,
                 log_transformed=bool(meta["log_transformed"]),
                 split=dict(meta.get("split", {})))
    ds.validate()
    return ds
