"""Evaluation metrics computed from quantized code indices and code vectors."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .numerics import DTYPE, torch_generator
from .quantizer import UnifiedCodebook, activation_stats, nearest
from .trainer import Checkpoint, CometModel

METRICS = ("agreement", "transfer", "retrieval", "activation")


@torch.no_grad()
def encode_codes(model: CometModel, cb: UnifiedCodebook, x: np.ndarray | torch.Tensor, modality: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (indices N x T, code vectors N x T x D) for raw sequences of one modality."""
    if modality not in model.enc:
        raise KeyError(f"model has no encoder for modality {modality!r}")
    z, _, _ = model.semantic(torch.as_tensor(x, dtype=DTYPE), modality)
    idx, _ = nearest(z, cb.codes)
    return idx.numpy(), cb.codes[idx].numpy()


def code_agreement_from_indices(idx_a: np.ndarray, idx_b: np.ndarray) -> float:
    idx_a, idx_b = np.asarray(idx_a), np.asarray(idx_b)
    if idx_a.size == 0:
        raise ValueError("no evaluation pairs")
    if idx_a.shape != idx_b.shape:
        raise ValueError("index arrays differ in shape")
    return float(np.mean(idx_a == idx_b))


def code_agreement(xa, xb, modalities: tuple[str, str], model: CometModel, cb: UnifiedCodebook) -> float:
    """Fraction of timesteps where both modalities of a pair pick the same code."""
    if len(xa) == 0:
        raise ValueError("no evaluation pairs")
    ia, _ = encode_codes(model, cb, xa, modalities[0])
    ib, _ = encode_codes(model, cb, xb, modalities[1])
    return code_agreement_from_indices(ia, ib)


def train_linear_head(features: np.ndarray, labels: np.ndarray, n_classes: int, steps: int = 200, lr: float = 1e-2, seed: int = 0) -> torch.nn.Linear:
    X = torch.as_tensor(features, dtype=DTYPE)
    y = torch.as_tensor(labels, dtype=torch.int64)
    head = torch.nn.Linear(X.shape[1], n_classes, dtype=DTYPE)
    gen = torch_generator(seed, "transfer-head")
    with torch.no_grad():
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=DTYPE) * 0.01)
        head.bias.zero_()
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(head(X), y)
        loss.backward()
        opt.step()
    return head


def transfer_accuracy(train_feats, train_labels, test_feats, test_labels, n_classes: int | None = None, steps: int = 200, lr: float = 1e-2, seed: int = 0) -> float:
    train_feats = np.asarray(train_feats).reshape(-1, np.shape(train_feats)[-1])
    test_feats = np.asarray(test_feats).reshape(-1, np.shape(test_feats)[-1])
    train_labels = np.asarray(train_labels).reshape(-1)
    test_labels = np.asarray(test_labels).reshape(-1)
    n_classes = n_classes or int(max(train_labels.max(), test_labels.max())) + 1
    head = train_linear_head(train_feats, train_labels, n_classes, steps, lr, seed)
    with torch.no_grad():
        pred = head(torch.as_tensor(test_feats, dtype=DTYPE)).argmax(-1).numpy()
    # categories never seen in training simply count as misses
    return float(np.mean(pred == test_labels))


def zero_shot_transfer(
    x_train, x_test, labels, modalities: tuple[str, str], model: CometModel, cb: UnifiedCodebook,
    steps: int = 200, lr: float = 1e-2, seed: int = 0,
) -> float:
    """Train a linear head on modality[0]'s code vectors, score it on modality[1]'s."""
    _, ea = encode_codes(model, cb, x_train, modalities[0])
    _, eb = encode_codes(model, cb, x_test, modalities[1])
    return transfer_accuracy(ea, labels, eb, labels, steps=steps, lr=lr, seed=seed)


def retrieval_recall(queries: np.ndarray, gallery: np.ndarray, k_list: Sequence[int]) -> dict[int, float]:
    """Cosine ranking; query i's partner is gallery row i; ties go to the lower gallery index."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    G = g.shape[0]
    for k in k_list:
        if k > G:
            raise ValueError(f"K={k} exceeds gallery size {G}")
        if k < 1:
            raise ValueError("K must be positive")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    sim = qn @ gn.T
    order = np.argsort(-sim, axis=1, kind="stable")
    rank = np.argmax(order == np.arange(q.shape[0])[:, None], axis=1)
    return {int(k): float(np.mean(rank < k)) for k in k_list}


def sequence_embeddings(code_vectors: np.ndarray) -> np.ndarray:
    return np.asarray(code_vectors).mean(axis=-2)


def forgetting(before: float, after: float) -> float:
    if before == 0:
        return 0.0
    return (before - after) / before


def export_code_activation(
    model: CometModel, cb: UnifiedCodebook, eval_sets: Mapping[str, np.ndarray], threshold: float = 1e-3, csv_path: str | Path | None = None
) -> dict[int, int]:
    """Classify every code by how many modalities effectively use it; optional per-code CSV."""
    indices = {m: encode_codes(model, cb, x, m)[0] for m, x in eval_sets.items()}
    stats = activation_stats(cb.size, indices, threshold)
    counts = {c: 0 for c in range(4)}
    for s in stats:
        counts[s.klass] += 1
    if csv_path is not None:
        mods = list(eval_sets)
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["code_id", "class", *[f"count_{m}" for m in mods]])
            for s in stats:
                w.writerow([s.code, s.klass, *[s.counts[m] for m in mods]])
    return counts


def multi_modal_fraction(counts: Mapping[int, int]) -> float:
    total = sum(counts.values())
    return (counts.get(2, 0) + counts.get(3, 0)) / total if total else 0.0


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    breakdown: dict[str, dict] = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {"metrics": self.metrics, "breakdown": self.breakdown, "seed": self.seed, "config_hash": self.config_hash},
            indent=2, sort_keys=True,
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


def evaluate_checkpoint(
    ckpt: Checkpoint, datasets: Sequence, metrics: Sequence[str], out_dir: str | Path | None = None,
    seed: int = 0, threshold: float = 1e-3,
) -> EvalReport:
    """Run the requested metric set over held-out stage datasets."""
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise KeyError(f"unknown metrics {unknown}; valid: {', '.join(METRICS)}")
    report = EvalReport(seed=seed, config_hash=ckpt.meta.get("config_hash", ""))
    if not metrics:
        return report
    model = ckpt.build_model()
    model.eval()
    cb = ckpt.codebook
    known = set(model.modalities)
    usable = [ds for ds in datasets if set(ds.modalities) <= known]
    for ds in usable:
        pair = f"stage{ds.stage}:{ds.mediator}-{ds.partner}"
        entry = {}
        if "agreement" in metrics:
            entry["agreement"] = code_agreement(ds.xa, ds.xb, ds.modalities, model, cb)
        if "transfer" in metrics:
            entry["transfer_a2b"] = zero_shot_transfer(ds.xa, ds.xb, ds.scripts, ds.modalities, model, cb, seed=seed)
            entry["transfer_b2a"] = zero_shot_transfer(ds.xb, ds.xa, ds.scripts, ds.modalities[::-1], model, cb, seed=seed)
        if "retrieval" in metrics:
            _, ea = encode_codes(model, cb, ds.xa, ds.mediator)
            _, eb = encode_codes(model, cb, ds.xb, ds.partner)
            ks = [k for k in (1, 5, 10) if k <= len(ds)]
            for direction, (q, g) in {"a2b": (ea, eb), "b2a": (eb, ea)}.items():
                for k, v in retrieval_recall(sequence_embeddings(q), sequence_embeddings(g), ks).items():
                    entry[f"recall@{k}_{direction}"] = v
        report.breakdown[pair] = entry
        for k, v in entry.items():
            report.metrics[f"{pair}/{k}"] = v
    if "activation" in metrics and usable:
        sets: dict[str, list] = {}
        for ds in usable:
            sets.setdefault(ds.mediator, []).append(ds.xa)
            sets.setdefault(ds.partner, []).append(ds.xb)
        eval_sets = {m: np.concatenate(v) for m, v in sets.items()}
        csv_path = Path(out_dir) / f"activation_stage{ckpt.stage}.csv" if out_dir is not None else None
        counts = export_code_activation(model, cb, eval_sets, threshold, csv_path)
        report.breakdown["activation"] = {str(k): v for k, v in counts.items()}
        report.metrics["activation/multi_modal_fraction"] = multi_modal_fraction(counts)
    return report
