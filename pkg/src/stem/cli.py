"""Command-line entry point: config handling, checkpoints, and the
synth / gene-select / train / sample / eval / baseline commands.

Exit codes: 2 malformed synthetic spec, 3 gene-selection failure,
4 numeric failure during training, 5 checkpoint/panel mismatch,
6 prediction/ground-truth alignment failure.
"""

from __future__ import annotations

import argparse
import copy
import io
import json
import os
import struct
import sys

import numpy as np

from . import data as dt
from . import diffusion as df
from . import evaluate as ev
from .errors import (FormatError, NumericError, ParameterError, PanelError,
                     SelectionError, StemError)
from .model import GenePanel, ModelConfig, ModelParameters
from .numerics import RngStream, Tensor
from .schedule import build_linear_schedule

CKPT_MAGIC = b"STEMCKPT"
CKPT_VERSION = 1

DEFAULT_CONFIG = {
    "model": {"D": 384, "depth": 12, "heads": 6, "time_dim": 256, "mlp_ratio": 4},
    "schedule": {"T": 1000, "beta_min": 1e-4, "beta_max": 0.02},
    "train": {"iterations": 250_000, "batch_size": 256, "lr": 1e-4,
              "weight_decay": 0.0, "beta1": 0.9, "beta2": 0.999,
              "ema_decay": 0.9999, "ratio_original": 1, "ratio_augmented": 4,
              "seed": 0, "grad_clip": None, "log_every": 100},
    "infer": {"n_samples": 20, "statistic": "mean", "use_ema": True},
    "paths": {"dataset_dir": None, "panel": None, "out_dir": None},
}

# Small model profile for laptop-scale experiments and the test suite.
DESK_MODEL = {"D": 64, "depth": 4, "heads": 4}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_set(config: dict, assignment: str) -> dict:
    """Apply one dotted --set override, e.g. train.lr=3e-4."""
    if "=" not in assignment:
        raise ParameterError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return config


def load_config(path: str | None, sets=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            cfg = deep_merge(cfg, json.load(f))
    for s in sets:
        apply_set(cfg, s)
    return cfg


# ---------------------------------------------------------------------------
# checkpoint format


_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_param_table(buf: io.BytesIO, params: ModelParameters):
    buf.write(struct.pack("<I", len(params.tensors)))
    for path in sorted(params.tensors):
        t = params.tensors[path]
        pb = path.encode()
        buf.write(struct.pack("<H", len(pb)))
        buf.write(pb)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[t.data.dtype], t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<")).tobytes())


def _read_param_table(raw: bytes, off: int, config: ModelConfig, requires_grad: bool):
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (plen,) = struct.unpack_from("<H", raw, off)
        off += 2
        path = raw[off:off + plen].decode()
        off += plen
        tag, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape).copy()
        off += n * dtype.itemsize
        tensors[path] = Tensor(arr.astype(dtype.newbyteorder("=")), requires_grad=requires_grad)
    return ModelParameters(config, tensors), off


def save_checkpoint(path: str, config_doc: dict, params: ModelParameters,
                    ema_params: ModelParameters, step: int, seed: int):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<qq", step, seed))
    cfg = json.dumps(config_doc, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_param_table(buf, params)
    _write_param_table(buf, ema_params)
    dt._atomic_write(path, buf.getvalue())


def load_checkpoint(path: str):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    step, seed = struct.unpack_from("<qq", raw, 12)
    (cfg_len,) = struct.unpack_from("<I", raw, 28)
    config_doc = json.loads(raw[32:32 + cfg_len].decode())
    model_config = model_config_from_doc(config_doc)
    off = 32 + cfg_len
    params, off = _read_param_table(raw, off, model_config, requires_grad=True)
    ema, off = _read_param_table(raw, off, model_config, requires_grad=False)
    return config_doc, params, ema, step, seed


def model_config_from_doc(doc: dict) -> ModelConfig:
    m = doc["model"]
    return ModelConfig(C=int(m["C"]), D=int(m["D"]), depth=int(m["depth"]),
                       heads=int(m["heads"]), cond_dim=int(m["cond_dim"]),
                       time_dim=int(m.get("time_dim", 256)),
                       mlp_ratio=int(m.get("mlp_ratio", 4)))


# ---------------------------------------------------------------------------
# commands


def _load_panel_file(path: str) -> GenePanel:
    with open(path) as f:
        doc = json.load(f)
    return GenePanel(tuple(doc["names"]), kind=doc.get("method", "custom"))


def cmd_synth(spec_file: str, out_dir: str, seed: int) -> dt.Dataset:
    try:
        with open(spec_file) as f:
            doc = json.load(f)
        spec = dt.SyntheticSpec.from_json(doc)
    except (OSError, json.JSONDecodeError, FormatError, ParameterError) as exc:
        raise SystemExit(_fail(2, f"malformed synthetic spec: {exc}"))
    dataset = dt.make_synthetic(spec, seed)
    dt.write_dataset(dataset, out_dir)
    oracle = {"seed": seed, "spec": spec.to_json()}
    dt._atomic_write(os.path.join(out_dir, "oracle.json"),
                     (json.dumps(oracle, indent=2, sort_keys=True) + "\n").encode())
    return dataset


def cmd_gene_select(dataset_dir: str, method: str, k: int, out_path: str) -> GenePanel:
    dataset = dt.load_dataset(dataset_dir)
    matrix = dt.log_matrix(dataset, dataset.train_records())
    try:
        if method == "hmhvg":
            panel = dt.select_hmhvg(matrix, dataset.panel.names, k)
        elif method == "hvg":
            panel = dt.select_hvg(matrix, dataset.panel.names, k)
        else:
            raise SelectionError(f"unknown method {method!r}")
    except SelectionError as exc:
        raise SystemExit(_fail(3, str(exc)))
    doc = {"method": method, "k": k, "names": list(panel.names)}
    dt._atomic_write(out_path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return panel


def cmd_train(config: dict) -> str:
    paths = config["paths"]
    dataset = dt.load_dataset(paths["dataset_dir"])
    if paths.get("panel"):
        panel = _load_panel_file(paths["panel"])
    else:
        panel = dataset.panel
    config = copy.deepcopy(config)
    config["model"]["C"] = len(panel)
    config["model"]["cond_dim"] = dataset.cond_dim
    config["panel"] = {"names": list(panel.names), "kind": panel.kind}
    model_config = model_config_from_doc(config)
    sc = config["schedule"]
    schedule = build_linear_schedule(int(sc["T"]), float(sc["beta_min"]), float(sc["beta_max"]))
    tc = config["train"]
    train_config = df.TrainConfig(
        iterations=int(tc["iterations"]), batch_size=int(tc["batch_size"]),
        lr=float(tc["lr"]), weight_decay=float(tc["weight_decay"]),
        beta1=float(tc["beta1"]), beta2=float(tc["beta2"]),
        ema_decay=float(tc["ema_decay"]),
        ratio_original=int(tc["ratio_original"]),
        ratio_augmented=int(tc["ratio_augmented"]), seed=int(tc["seed"]),
        grad_clip=tc.get("grad_clip"), log_every=int(tc["log_every"]))
    plan = dt.expand_augmented(dataset, train_config.ratio_original,
                               train_config.ratio_augmented, panel)
    out_dir = paths["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    log_lines = []
    try:
        state = df.train(plan, model_config, schedule, train_config, log=log_lines.append)
    except NumericError as exc:
        raise SystemExit(_fail(4, str(exc)))
    dt._atomic_write(os.path.join(out_dir, "train.log"),
                     ("".join(line + "\n" for line in log_lines)).encode())
    ckpt_path = os.path.join(out_dir, "ckpt.bin")
    save_checkpoint(ckpt_path, config, state.params, state.ema_params,
                    state.step, train_config.seed)
    return ckpt_path


def _write_pred_csv(path: str, spot_rows, panel_names):
    buf = io.StringIO()
    buf.write("spot_id,slide_id," + ",".join(panel_names) + "\n")
    for spot_id, slide_id, values in spot_rows:
        buf.write(spot_id + "," + slide_id + ","
                  + ",".join(repr(float(v)) for v in values) + "\n")
    dt._atomic_write(path, buf.getvalue().encode())


def read_pred_csv(path: str):
    """Returns (spot_ids, slide_ids, gene_names, matrix)."""
    import csv as _csv
    with open(path, newline="") as f:
        reader = _csv.reader(f)
        header = next(reader)
        genes = header[2:]
        sids, slides, rows = [], [], []
        for row in reader:
            sids.append(row[0])
            slides.append(row[1])
            rows.append([float(x) for x in row[2:]])
    return sids, slides, genes, np.array(rows, dtype=np.float64)


def cmd_sample(checkpoint: str, dataset_dir: str, out_path: str, split: str = "test",
               n: int | None = None, statistic: str | None = None,
               use_ema: bool | None = None, samples_bin: str | None = None) -> None:
    config, params, ema, step, seed = load_checkpoint(checkpoint)
    dataset = dt.load_dataset(dataset_dir)
    try:
        panel = GenePanel(tuple(config["panel"]["names"]), kind=config["panel"].get("kind", "custom"))
        for g in panel.names:
            if g not in dataset.panel.names:
                raise PanelError(f"checkpoint panel gene {g!r} missing from dataset")
        if config["model"]["cond_dim"] != dataset.cond_dim:
            raise PanelError(f"checkpoint cond_dim {config['model']['cond_dim']} != "
                             f"dataset {dataset.cond_dim}")
    except (KeyError, PanelError) as exc:
        raise SystemExit(_fail(5, str(exc)))
    infer = config.get("infer", {})
    n = int(infer.get("n_samples", 20)) if n is None else n
    statistic = infer.get("statistic", "mean") if statistic is None else statistic
    use_ema = bool(infer.get("use_ema", True)) if use_ema is None else use_ema

    records = dataset.test_records() if split == "test" else dataset.train_records()
    sc = config["schedule"]
    schedule = build_linear_schedule(int(sc["T"]), float(sc["beta_min"]), float(sc["beta_max"]))
    weights = ema if use_ema else params
    embeddings = np.stack([r.embedding("identity") for r in records])
    rng = RngStream(seed).child(3)
    samples = df.sample_many(embeddings, n, weights, schedule, rng)
    rows = [(r.spot_id, r.slide_id, ev.summarize_samples(samples[i], statistic))
            for i, r in enumerate(records)]
    _write_pred_csv(out_path, rows, panel.names)
    if samples_bin:
        dt._atomic_write(samples_bin, samples.astype("<f4").tobytes())


def cmd_eval(pred_csv: str, dataset_dir: str, k_list, out_dir: str) -> ev.EvalReport:
    sids, _, genes, pred = read_pred_csv(pred_csv)
    dataset = dt.load_dataset(dataset_dir)
    panel = GenePanel(tuple(genes), kind="custom")
    records = {r.spot_id: r for r in dataset.records}
    gt_rows = []
    for sid in sids:
        if sid not in records:
            raise SystemExit(_fail(6, f"prediction spot_id {sid!r} not in dataset"))
        gt_rows.append(records[sid])
    gt = dt.project_to_panel(dataset, dt.log_matrix(dataset, gt_rows), panel)
    report = ev.evaluate(pred, gt, panel, k_list)
    curve = ev.variation_curve(pred, gt, panel)
    os.makedirs(out_dir, exist_ok=True)
    dt._atomic_write(os.path.join(out_dir, "report.json"), report.to_json().encode())
    dt._atomic_write(os.path.join(out_dir, "variation_curve.csv"), curve.to_csv().encode())
    return report


def cmd_baseline(dataset_dir: str, k: int, out_path: str,
                 panel_file: str | None = None, metric: str = "euclidean") -> None:
    dataset = dt.load_dataset(dataset_dir)
    panel = _load_panel_file(panel_file) if panel_file else dataset.panel
    train = dataset.train_records()
    test = dataset.test_records()
    X = dt.project_to_panel(dataset, dt.log_matrix(dataset, train), panel)
    E = np.stack([r.embedding("identity") for r in train])
    Q = np.stack([r.embedding("identity") for r in test])
    try:
        pred = ev.retrieval_baseline(X, E, [r.spot_id for r in train], Q, k, metric)
    except ParameterError as exc:
        raise SystemExit(_fail(6, str(exc)))
    rows = [(r.spot_id, r.slide_id, pred[i]) for i, r in enumerate(test)]
    _write_pred_csv(out_path, rows, panel.names)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stem",
                                description="Conditional diffusion inference of "
                                            "spot-level gene expression.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("gene-select", help="select a gene panel from a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--method", choices=["hmhvg", "hvg"], required=True)
    s.add_argument("-k", type=int, required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train the denoiser")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE", help="override a config entry")

    s = sub.add_parser("sample", help="sample predictions for a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=["train", "test"], default="test")
    s.add_argument("-n", type=int, default=None)
    s.add_argument("--statistic", choices=["mean", "median", "mode"], default=None)
    s.add_argument("--raw-weights", action="store_true",
                   help="sample with raw instead of EMA weights")
    s.add_argument("--samples-bin", default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--k-list", default="10,50,200")
    s.add_argument("--out", required=True)

    s = sub.add_parser("baseline", help="nearest-neighbor retrieval predictions")
    s.add_argument("--dataset", required=True)
    s.add_argument("-k", type=int, required=True)
    s.add_argument("--panel", default=None)
    s.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    s.add_argument("--out", required=True)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args.spec, args.out, args.seed)
        elif args.command == "gene-select":
            cmd_gene_select(args.dataset, args.method, args.k, args.out)
        elif args.command == "train":
            cmd_train(load_config(args.config, args.sets))
        elif args.command == "sample":
            cmd_sample(args.checkpoint, args.dataset, args.out, split=args.split,
                       n=args.n, statistic=args.statistic,
                       use_ema=(False if args.raw_weights else None),
                       samples_bin=args.samples_bin)
        elif args.command == "eval":
            k_list = [int(k) for k in args.k_list.split(",") if k]
            cmd_eval(args.pred, args.dataset, k_list, args.out)
        elif args.command == "baseline":
            cmd_baseline(args.dataset, args.k, args.out, args.panel, args.metric)
    except SystemExit:
        raise
    except StemError as exc:
        return _fail(1, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
