"""Paired synthetic modality sequences with known ground-truth semantics.

Each stage pairs the mediator modality with one partner. Both sequences of a
pair are rendered from one category script, so exact cross-modal alignment
is known by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .numerics import derive_seed

DATA_MAGIC = b"CMTDATA1"
DATA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    d_raw: int = 32
    seq_len: int = 16
    categories_per_stage: int = 8
    pairs_per_stage: int = 512
    eval_pairs: int = 128
    overlap: float = 0.25
    noise: float = 0.1
    nuisance_dim: int = 4
    nuisance_scale: float = 0.5
    p_stay: float = 0.9
    world_seed: int = 0


def generate_script(C: int, T: int, seed: int, p_stay: float = 0.9) -> np.ndarray:
    """Markov category script: stay with prob p_stay, else redraw uniformly from all C."""
    if C < 2:
        raise ValueError(f"need at least 2 categories, got {C}")
    if T < 2:
        raise ValueError(f"need at least 2 timesteps, got {T}")
    if not 0.0 <= p_stay <= 1.0:
        raise ValueError("p_stay must lie in [0, 1]")
    rng = np.random.default_rng(derive_seed(seed, "script"))
    stay = rng.random(T) < p_stay
    draws = rng.integers(0, C, size=T)
    out = np.empty(T, dtype=np.int64)
    out[0] = draws[0]
    for t in range(1, T):
        out[t] = out[t - 1] if stay[t] else draws[t]
    return out


@dataclass
class ModalityRenderer:
    modality: str
    embeddings: np.ndarray  # C_total x D_raw
    nuisance_proj: np.ndarray  # nuisance_dim x D_raw
    noise: float
    nuisance_scale: float

    @classmethod
    def create(cls, modality: str, n_categories: int, cfg: DataConfig) -> "ModalityRenderer":
        # rows seeded per category so growing C_total never changes existing rows
        rows = [
            np.random.default_rng(derive_seed(cfg.world_seed, "embed", modality, c)).standard_normal(cfg.d_raw)
            for c in range(n_categories)
        ]
        proj_rng = np.random.default_rng(derive_seed(cfg.world_seed, "nuisance", modality))
        proj = proj_rng.standard_normal((cfg.nuisance_dim, cfg.d_raw)) / np.sqrt(max(cfg.nuisance_dim, 1))
        r = cls(modality, np.stack(rows), proj, cfg.noise, cfg.nuisance_scale)
        r.validate()
        return r

    @property
    def n_categories(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d_raw(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        E = self.embeddings
        if E.shape[0] >= 2:
            d = np.sqrt(((E[:, None, :] - E[None, :, :]) ** 2).sum(-1))
            d[np.diag_indices_from(d)] = np.inf
            if d.min() <= 10 * self.noise:
                raise ValueError(
                    f"renderer {self.modality}: category rows too close ({d.min():.3g} <= 10*noise)"
                )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.modality.encode())
        h.update(np.ascontiguousarray(self.embeddings, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.nuisance_proj, dtype="<f8").tobytes())
        h.update(struct.pack("<dd", self.noise, self.nuisance_scale))
        return h.hexdigest()[:16]


def render(script: np.ndarray, renderer: ModalityRenderer, seed: int) -> np.ndarray:
    """x_t = M[script_t] + nuisance_t @ P + noise_t.

    The nuisance is a slowly drifting per-sequence latent (AR(1)). Noise and
    nuisance draws depend on the seed only, never on the script.
    """
    script = np.asarray(script, dtype=np.int64)
    if script.min(initial=0) < 0 or script.max(initial=0) >= renderer.n_categories:
        raise IndexError(f"script id outside [0, {renderer.n_categories})")
    T = script.shape[0]
    rng = np.random.default_rng(derive_seed(seed, "render", renderer.modality))
    k = renderer.nuisance_proj.shape[0]
    nuis = np.empty((T, k))
    nuis[0] = rng.standard_normal(k)
    innov = rng.standard_normal((T, k))
    for t in range(1, T):
        nuis[t] = 0.9 * nuis[t - 1] + np.sqrt(1 - 0.81) * innov[t]
    eps = rng.standard_normal((T, renderer.d_raw))
    x = renderer.embeddings[script].copy()
    if renderer.nuisance_scale != 0.0:
        x += renderer.nuisance_scale * (nuis @ renderer.nuisance_proj)
    if renderer.noise != 0.0:
        x += renderer.noise * eps
    return x


@dataclass(frozen=True)
class StageSpec:
    index: int
    mediator: str
    partner: str
    category_lo: int
    category_hi: int
    shared: tuple[int, ...] = ()
    n_pairs: int = 512
    seq_len: int = 16
    p_stay: float = 0.9

    @property
    def modalities(self) -> tuple[str, str]:
        return (self.mediator, self.partner)

    @property
    def categories(self) -> np.ndarray:
        return np.array(sorted(set(self.shared) | set(range(self.category_lo, self.category_hi))), dtype=np.int64)


@dataclass
class StageDataset:
    xa: np.ndarray  # N x T x D_raw, mediator
    xb: np.ndarray  # N x T x D_raw, partner
    scripts: np.ndarray  # N x T int
    modalities: tuple[str, str]
    category_range: tuple[int, int]
    shared: tuple[int, ...]
    stage: int
    seed: int
    fingerprints: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.xa.shape[0]

    @property
    def mediator(self) -> str:
        return self.modalities[0]

    @property
    def partner(self) -> str:
        return self.modalities[1]

    def header(self) -> dict:
        return {
            "version": DATA_VERSION,
            "shape": list(self.xa.shape),
            "modalities": list(self.modalities),
            "category_range": list(self.category_range),
            "shared": list(self.shared),
            "stage": self.stage,
            "seed": self.seed,
            "fingerprints": self.fingerprints,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        payload = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (self.xa, self.xb, self.scripts)
        )
        return DATA_MAGIC + struct.pack("<Q", len(head)) + head + payload

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StageDataset":
        if blob[:8] != DATA_MAGIC:
            raise ValueError("not a stage dataset file")
        (n,) = struct.unpack("<Q", blob[8:16])
        head = json.loads(blob[16 : 16 + n])
        if head.get("version") != DATA_VERSION:
            raise ValueError(f"dataset format version {head.get('version')} unsupported")
        N, T, D = head["shape"]
        body = np.frombuffer(blob[16 + n :], dtype="<f8")
        if body.size != 2 * N * T * D + N * T:
            raise ValueError("dataset payload truncated or oversized")
        xa = body[: N * T * D].reshape(N, T, D).copy()
        xb = body[N * T * D : 2 * N * T * D].reshape(N, T, D).copy()
        scripts = body[2 * N * T * D :].reshape(N, T).astype(np.int64)
        return cls(
            xa, xb, scripts, tuple(head["modalities"]), tuple(head["category_range"]),
            tuple(head["shared"]), head["stage"], head["seed"], dict(head["fingerprints"]),
        )


def load_dataset(path: str | Path) -> StageDataset:
    return StageDataset.from_bytes(Path(path).read_bytes())


def generate_stage_dataset(
    spec: StageSpec,
    renderers: Mapping[str, ModalityRenderer],
    seed: int,
    mediator_fingerprint: str | None = None,
) -> StageDataset:
    med, par = renderers[spec.mediator], renderers[spec.partner]
    if med.modality != spec.mediator or par.modality != spec.partner:
        raise ValueError("renderer modality ids do not match the stage spec")
    if mediator_fingerprint is not None and med.fingerprint() != mediator_fingerprint:
        raise ValueError(f"mediator renderer for {spec.mediator} differs from earlier stages")
    cats = spec.categories
    if cats.max() >= min(med.n_categories, par.n_categories):
        raise IndexError("stage categories exceed renderer vocabulary")
    N, T = spec.n_pairs, spec.seq_len
    xa = np.empty((N, T, med.d_raw))
    xb = np.empty((N, T, par.d_raw))
    scripts = np.empty((N, T), dtype=np.int64)
    for i in range(N):
        pair_seed = derive_seed(seed, spec.index, i)
        script = cats[generate_script(len(cats), T, pair_seed, spec.p_stay)]
        scripts[i] = script
        xa[i] = render(script, med, derive_seed(pair_seed, "a"))
        xb[i] = render(script, par, derive_seed(pair_seed, "b"))
    return StageDataset(
        xa, xb, scripts, spec.modalities, (spec.category_lo, spec.category_hi), tuple(spec.shared),
        spec.index, seed, {spec.mediator: med.fingerprint(), spec.partner: par.fingerprint()},
    )


def check_mediator_consistency(datasets: Sequence[StageDataset]) -> None:
    seen: dict[str, str] = {}
    for ds in datasets:
        for m, fp in ds.fingerprints.items():
            if seen.setdefault(m, fp) != fp:
                raise ValueError(f"modality {m} rendered inconsistently across stages")


def plan_stage_specs(modality_pairs: Sequence[tuple[str, str]], cfg: DataConfig, n_pairs: int | None = None) -> list[StageSpec]:
    """Stage s gets C fresh categories plus round(overlap*C) ids shared with stage 1."""
    C = cfg.categories_per_stage
    n_shared = int(round(cfg.overlap * C))
    specs = []
    for s, (med, par) in enumerate(modality_pairs, start=1):
        lo, hi = (s - 1) * C, s * C
        shared = tuple(range(n_shared)) if s > 1 else ()
        specs.append(StageSpec(s, med, par, lo, hi, shared, n_pairs or cfg.pairs_per_stage, cfg.seq_len, cfg.p_stay))
    return specs


def build_renderers(modalities: Sequence[str], n_categories: int, cfg: DataConfig) -> dict[str, ModalityRenderer]:
    return {m: ModalityRenderer.create(m, n_categories, cfg) for m in dict.fromkeys(modalities)}
