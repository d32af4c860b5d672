"""Evaluation metrics, sample summarization, variation-curve export, and the
nearest-neighbor retrieval baseline.

All metrics operate in log-transformed space on spots x genes matrices.
Variances are population (1/N) variances throughout.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .model import GenePanel


@dataclass
class EvalReport:
    per_gene_pcc: np.ndarray       # NaN marks undefined (zero-variance) genes
    pcc_top: dict                  # k -> mean of k largest defined PCCs
    mae: float
    mse: float
    rvd: float
    n_spots: int
    n_genes: int
    panel: GenePanel | None = None

    @property
    def undefined_genes(self) -> int:
        return int(np.isnan(self.per_gene_pcc).sum())

    def to_json(self) -> str:
        doc = {
            "pcc_top": {str(k): v for k, v in sorted(self.pcc_top.items())},
            "mae": self.mae,
            "mse": self.mse,
            "rvd": self.rvd,
            "n_spots": self.n_spots,
            "n_genes": self.n_genes,
            "undefined_genes": self.undefined_genes,
            "per_gene_pcc": [None if np.isnan(v) else float(v) for v in self.per_gene_pcc],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@dataclass
class VariationCurve:
    """Per-gene variances ordered ascending by ground-truth variance."""

    genes: list
    gt_var: np.ndarray
    pred_var: np.ndarray

    @property
    def gt_var_norm(self) -> np.ndarray:
        return self.gt_var / self.gt_var.sum()

    @property
    def pred_var_norm(self) -> np.ndarray:
        return self.pred_var / self.pred_var.sum()

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("gene,gt_var,pred_var,gt_var_norm,pred_var_norm\n")
        gn, pn = self.gt_var_norm, self.pred_var_norm
        for i, g in enumerate(self.genes):
            buf.write(f"{g},{self.gt_var[i]!r},{self.pred_var[i]!r},{gn[i]!r},{pn[i]!r}\n")
        return buf.getvalue()


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt


def pcc_per_gene(pred, gt) -> np.ndarray:
    """Pearson correlation per gene column; zero-variance columns give NaN."""
    pred, gt = _check_pair(pred, gt)
    if pred.shape[0] < 2:
        raise ParameterError("PCC needs at least 2 spots")
    pc = pred - pred.mean(axis=0)
    gc = gt - gt.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    sg = np.sqrt((gc * gc).sum(axis=0))
    out = np.full(pred.shape[1], np.nan)
    ok = (sp > 0) & (sg > 0)
    out[ok] = (pc * gc).sum(axis=0)[ok] / (sp[ok] * sg[ok])
    return out


def pcc_top_k(per_gene: np.ndarray, k: int) -> float:
    """Mean of the k largest defined per-gene correlations."""
    defined = np.sort(per_gene[~np.isnan(per_gene)])[::-1]
    if k > defined.size:
        raise ParameterError(f"k={k} exceeds the {defined.size} defined genes")
    return float(defined[:k].mean())


def mae_mse(pred, gt) -> tuple:
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def _gene_variances(pred, gt):
    pred, gt = _check_pair(pred, gt)
    gt_var = gt.var(axis=0)
    pred_var = pred.var(axis=0)
    keep = gt_var > 0
    if not keep.any():
        raise ParameterError("all ground-truth gene variances are zero; RVD undefined")
    if not keep.all():
        warnings.warn(f"excluding {int((~keep).sum())} zero-variance genes from RVD")
    return pred_var, gt_var, keep


def rvd(pred, gt) -> float:
    """Mean over genes of ((pred_var - gt_var) / gt_var)^2."""
    pred_var, gt_var, keep = _gene_variances(pred, gt)
    terms = ((pred_var[keep] - gt_var[keep]) ** 2) / (gt_var[keep] ** 2)
    return float(terms.mean())


def variation_curve(pred, gt, panel: GenePanel) -> VariationCurve:
    pred_var, gt_var, keep = _gene_variances(pred, gt)
    names = [n for n, k in zip(panel.names, keep) if k]
    gv = gt_var[keep]
    pv = pred_var[keep]
    order = np.argsort(gv, kind="stable")
    return VariationCurve(genes=[names[i] for i in order],
                          gt_var=gv[order], pred_var=pv[order])


def summarize_samples(samples, stat: str = "mean") -> np.ndarray:
    """Collapse (n, C) generated samples into one prediction per gene.

    mean: arithmetic mean. median: midpoint-interpolated 50th percentile.
    mode: center of the max-count histogram bin with Freedman-Diaconis width
    (range/sqrt(n) when the IQR is zero); bin-count ties pick the lowest bin.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ParameterError(f"need an (n, C) sample matrix with n >= 1, got {samples.shape}")
    n = samples.shape[0]
    if stat == "mean":
        return samples.mean(axis=0)
    if stat == "median":
        return np.median(samples, axis=0)
    if stat != "mode":
        raise ParameterError(f"unknown statistic {stat!r}")

    out = np.empty(samples.shape[1])
    for j in range(samples.shape[1]):
        col = samples[:, j]
        lo, hi = col.min(), col.max()
        if lo == hi or n == 1:
            out[j] = lo
            continue
        q75, q25 = np.percentile(col, [75, 25])
        iqr = q75 - q25
        h = 2.0 * iqr / n ** (1.0 / 3.0) if iqr > 0 else (hi - lo) / np.sqrt(n)
        nbins = max(1, int(np.ceil((hi - lo) / h)))
        counts, edges = np.histogram(col, bins=nbins, range=(lo, hi))
        b = int(np.argmax(counts))  # argmax picks the lowest bin on ties
        out[j] = 0.5 * (edges[b] + edges[b + 1])
    return out


def retrieval_baseline(train_profiles, train_embeddings, train_spot_ids,
                       query_embeddings, k: int, metric: str = "euclidean") -> np.ndarray:
    """Mean log-profile of each query's k nearest training spots.

    Distance ties are broken by spot_id order; metric is euclidean by
    default with cosine available.
    """
    X = np.asarray(train_profiles, dtype=np.float64)
    E = np.asarray(train_embeddings, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise ParameterError("retrieval baseline needs a nonempty training set")
    if not (1 <= k <= n):
        raise ParameterError(f"k={k} outside 1..{n}")
    if metric == "euclidean":
        d2 = ((E[None, :, :] - Q[:, None, :]) ** 2).sum(axis=-1)
        dist = np.sqrt(d2)
    elif metric == "cosine":
        En = E / np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
        Qn = Q / np.maximum(np.linalg.norm(Q, axis=1, keepdims=True), 1e-12)
        dist = 1.0 - Qn @ En.T
    else:
        raise ParameterError(f"unknown metric {metric!r}")

    id_rank = np.argsort(np.argsort(np.asarray(train_spot_ids, dtype=object), kind="stable"))
    out = np.empty((Q.shape[0], X.shape[1]))
    for qi in range(Q.shape[0]):
        order = sorted(range(n), key=lambda i: (dist[qi, i], id_rank[i]))
        out[qi] = X[order[:k]].mean(axis=0)
    return out


def evaluate(pred, gt, panel: GenePanel | None, k_list) -> EvalReport:
    """Assemble the full report for one prediction matrix."""
    pred, gt = _check_pair(pred, gt)
    per_gene = pcc_per_gene(pred, gt)
    tops = {int(k): pcc_top_k(per_gene, int(k)) for k in k_list}
    mae, mse = mae_mse(pred, gt)
    return EvalReport(per_gene_pcc=per_gene, pcc_top=tops, mae=mae, mse=mse,
                      rvd=rvd(pred, gt), n_spots=pred.shape[0],
                      n_genes=pred.shape[1], panel=panel)
