"""Stage orchestration, the training step and checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import synthgen
from .cmoe_adapter import CMoEAdapter, adapter_forward, gate_load_loss
from .encoders import ModalityEncoder, decode, encode
from .ewc import FisherSnapshot, estimate_fisher, ewc_loss, select_scope
from .numerics import DTYPE, GatedRecurrentCell, cross_attention, derive_seed, torch_generator
from .objectives import (
    CpcHead,
    VariationalNet,
    club_aux_nll,
    club_upper_bound,
    cross_cpc_batch,
    recon_loss,
    total_loss,
)
from .pmr import PSEUDO, build_pseudo_sequence, pmr_cpc_loss
from .quantizer import TeacherSnapshot, UnifiedCodebook, commitment_loss, expand, mm_ema_update, quantize

ABLATIONS = ("pm", "moe", "gate", "ewc", "sl")
BREAKDOWN_KEYS = ("recon", "commit", "cpc", "mi", "gate", "pmr", "ewc")
METRIC_COLUMNS = (
    "stage", "epoch", "step", "loss_recon", "loss_commit", "loss_cpc", "loss_mi",
    "loss_gate", "loss_pmr", "loss_ewc", "teacher_fraction",
)
CKPT_MAGIC = b"CMTCKPT1"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_raw: int = 32
    d_code: int = 16
    d_spec: int = 8
    hidden: int = 64
    context_dim: int = 16
    experts: int = 6
    k_steps: int = 2
    codebook_size: int = 64


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    gamma: float = 0.99
    beta: float = 0.25
    ewc_lambda: float = 100.0
    fisher_samples: int = 256
    k2: int = 32
    weights: tuple[tuple[str, float], ...] = ()
    ablate: frozenset[str] = frozenset()

    def __post_init__(self):
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablations {sorted(bad)}; valid: {', '.join(ABLATIONS)}")

    def uses(self, part: str) -> bool:
        """Whether a component is active; removing the MoE also removes gate, EWC and specific layers."""
        if part in ("gate", "ewc", "sl") and "moe" in self.ablate:
            return False
        return part not in self.ablate


@dataclass
class StagePlan:
    index: int
    mediator: str
    partner: str
    dataset: str | Path | synthgen.StageDataset
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    @property
    def epochs(self) -> int:
        return self.train.epochs

    @property
    def k2(self) -> int:
        return self.train.k2

    def config_hash(self) -> str:
        doc = {
            "index": self.index, "mediator": self.mediator, "partner": self.partner, "seed": self.seed,
            "train": {**asdict(self.train), "ablate": sorted(self.train.ablate)}, "model": asdict(self.model),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


class CometModel(nn.Module):
    """All trainable networks; the codebook lives outside (EMA-updated, not gradient-trained)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, use_specific: bool = True):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.use_specific = use_specific
        self.enc = nn.ModuleDict()
        self.adapter = CMoEAdapter(cfg.d_code, cfg.experts, seed, use_specific)
        self.ctx = nn.ModuleDict()
        self.cpc = CpcHead(cfg.k_steps, cfg.context_dim, cfg.d_code, seed)
        self.club = nn.ModuleDict()

    @property
    def modalities(self) -> list[str]:
        return list(self.enc.keys())

    def add_modality(self, m: str) -> None:
        if m == PSEUDO:
            raise ValueError(f"{PSEUDO!r} is reserved")
        c = self.cfg
        if m not in self.enc:
            self.enc[m] = ModalityEncoder(m, c.d_raw, c.d_code, c.d_spec, c.hidden, self.seed)
            self.ctx[m] = GatedRecurrentCell(c.d_code, c.context_dim, torch_generator(self.seed, "ctx", m))
            self.club[m] = VariationalNet(c.d_code, c.d_spec, c.hidden, self.seed, m)
            self.cpc.add(m)
        self.adapter.add_modality(m)

    def enable_replay(self) -> None:
        if PSEUDO not in self.ctx:
            self.ctx[PSEUDO] = GatedRecurrentCell(self.cfg.d_code, self.cfg.context_dim, torch_generator(self.seed, "ctx", PSEUDO))
            self.cpc.add(PSEUDO)

    def main_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("club.")]

    def aux_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("club.")]

    def semantic(self, x: torch.Tensor, m: str):
        h, z_bar = encode(x, self.enc[m])
        out = adapter_forward(h, m, self.adapter)
        return out.z, z_bar, out.gates

    def structure(self) -> dict:
        return {
            "modalities": self.modalities,
            "replay": PSEUDO in self.ctx,
            "use_specific": self.use_specific,
            "seed": self.seed,
            "model": asdict(self.cfg),
        }

    @classmethod
    def from_structure(cls, s: dict) -> "CometModel":
        model = cls(ModelConfig(**s["model"]), s["seed"], s["use_specific"])
        for m in s["modalities"]:
            model.add_modality(m)
        if s["replay"]:
            model.enable_replay()
        return model


@dataclass
class StageContext:
    stage: int
    mediator: str
    partner: str
    train: TrainConfig
    teacher: TeacherSnapshot | None = None
    fishers: list[FisherSnapshot] = field(default_factory=list)
    cmcm_hook: Callable | None = None

    @property
    def replay(self) -> bool:
        return self.stage >= 2 and self.teacher is not None and self.train.uses("pm")


@dataclass
class TrainState:
    model: CometModel
    codebook: UnifiedCodebook
    main_opt: torch.optim.Optimizer
    aux_opt: torch.optim.Optimizer

    @classmethod
    def create(cls, model: CometModel, codebook: UnifiedCodebook, lr: float) -> "TrainState":
        main = [p for _, p in model.main_parameters()]
        aux = [p for _, p in model.aux_parameters()]
        return cls(model, codebook, torch.optim.Adam(main, lr=lr, foreach=True), torch.optim.Adam(aux, lr=lr, foreach=True))


@dataclass
class ForwardPass:
    per_example: dict[str, torch.Tensor]
    z: dict[str, torch.Tensor]
    z_bar: dict[str, torch.Tensor]
    indices: dict[str, torch.Tensor]
    gates: torch.Tensor
    pmr: torch.Tensor
    teacher_fraction: float


def forward_losses(model: CometModel, cb: UnifiedCodebook, xa: torch.Tensor, xb: torch.Tensor, ctx: StageContext) -> ForwardPass:
    """Per-example pretraining losses for one paired batch (mediator xa, partner xb)."""
    ma, mb = ctx.mediator, ctx.partner
    beta = ctx.train.beta
    per = {"recon": 0.0, "commit": 0.0, "cpc": 0.0, "mi": 0.0}
    zs, zbars, idxs, gates = {}, {}, {}, []
    for m, x in ((ma, xa), (mb, xb)):
        z, z_bar, g = model.semantic(x, m)
        q = quantize(z, cb)
        x_hat = decode(q.codes, z_bar, model.enc[m])
        per["recon"] = per["recon"] + recon_loss(x_hat, x, per_example=True)
        per["commit"] = per["commit"] + commitment_loss(z, q.codes, beta, per_example=True)
        # the bound reaches the network through z_bar only; pushing z through a lagging q
        # lets the main step drive z off the data manifold where q extrapolates badly
        per["mi"] = per["mi"] + club_upper_bound(z.detach(), z_bar, model.club[m], per_example=True)
        zs[m], zbars[m], idxs[m] = z, z_bar, q.indices
        gates.append(g)
    ca, cb_ctx = model.ctx[ma](zs[ma]), model.ctx[mb](zs[mb])
    per["cpc"] = cross_cpc_batch(ca, zs[mb], model.cpc[ma], per_example=True) + cross_cpc_batch(
        cb_ctx, zs[ma], model.cpc[mb], per_example=True
    )
    pmr = torch.zeros((), dtype=DTYPE)
    frac = 0.0
    if ctx.replay:
        pseudo = build_pseudo_sequence(zs[ma].detach(), ctx.teacher, cb)
        pmr = pmr_cpc_loss(pseudo, zs[ma], zs[mb], model.cpc, model.ctx, ma, mb)
        frac = pseudo.teacher_fraction
    return ForwardPass(per, zs, zbars, idxs, torch.cat(gates, dim=-2), pmr, frac)


def adapter_params(model: CometModel) -> dict[str, torch.Tensor]:
    return {f"adapter.{n}": p for n, p in model.adapter.named_parameters()}


def _set_requires_grad(params, flag: bool) -> None:
    for _, p in params:
        p.requires_grad_(flag)


def train_step(batch: tuple[torch.Tensor, torch.Tensor], state: TrainState, ctx: StageContext) -> tuple[dict[str, float], float]:
    """One main update, one CLUB-approximation update, then the codebook EMA.

    Returns the loss breakdown (keys BREAKDOWN_KEYS) and the batch's teacher-sourced fraction.
    """
    xa, xb = batch
    model, cb, cfg = state.model, state.codebook, ctx.train
    weights = dict(cfg.weights)

    _set_requires_grad(model.aux_parameters(), False)
    fp = forward_losses(model, cb, xa, xb, ctx)
    comps = {k: v.mean() for k, v in fp.per_example.items()}
    comps["gate"] = gate_load_loss(fp.gates) if cfg.uses("gate") else torch.zeros((), dtype=DTYPE)
    core = total_loss(comps, weights, ctx.cmcm_hook)
    ewc = torch.zeros((), dtype=DTYPE)
    if cfg.uses("ewc") and ctx.fishers:
        params = adapter_params(model)
        for snap in ctx.fishers:
            ewc = ewc + ewc_loss(params, snap)
    extras = {"pmr": fp.pmr, "ewc": ewc}
    for name, value in extras.items():
        if not torch.isfinite(value):
            raise TrainingError(f"loss component {name!r} is not finite")
    loss = core.total + weights.get("pmr", 1.0) * fp.pmr + ewc
    state.main_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.main_opt.step()
    _set_requires_grad(model.aux_parameters(), True)

    nll = sum(club_aux_nll(fp.z[m].detach(), fp.z_bar[m].detach(), model.club[m]) for m in (ctx.mediator, ctx.partner))
    state.aux_opt.zero_grad(set_to_none=True)
    nll.backward()
    state.aux_opt.step()

    with torch.no_grad():
        za, zb = fp.z[ctx.mediator], fp.z[ctx.partner]
        r_b = cross_attention(za, zb)
        r_a = cross_attention(zb, za)
        mm_ema_update(cb, za, fp.indices[ctx.mediator], zb, fp.indices[ctx.partner], r_b, r_a)

    out = {k: core.parts[k] for k in ("recon", "commit", "cpc", "mi", "gate")}
    out["pmr"] = float(fp.pmr.detach())
    out["ewc"] = float(ewc.detach())
    return out, fp.teacher_fraction


@dataclass
class Checkpoint:
    structure: dict
    params: dict[str, np.ndarray]
    codebook: UnifiedCodebook
    teacher: TeacherSnapshot | None
    fishers: list[FisherSnapshot]
    optimizer: dict[str, np.ndarray]
    meta: dict

    @property
    def stage(self) -> int:
        return self.meta["stage"]

    def build_model(self) -> CometModel:
        model = CometModel.from_structure(self.structure)
        own = dict(model.named_parameters())
        if set(own) != set(self.params):
            raise CheckpointError(f"parameter paths differ: {sorted(set(own) ^ set(self.params))[:5]}")
        with torch.no_grad():
            for name, p in own.items():
                p.copy_(torch.from_numpy(self.params[name].copy()))
        return model


def _optimizer_arrays(opt: torch.optim.Optimizer, names: dict[int, str], tag: str) -> dict[str, np.ndarray]:
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            name = names[id(p)]
            for key, val in st.items():
                out[f"{tag}/{name}/{key}"] = torch.as_tensor(val, dtype=DTYPE).detach().numpy().copy()
    return out


def snapshot(state: TrainState, ctx: StageContext, meta: dict) -> Checkpoint:
    names = {id(p): n for n, p in state.model.named_parameters()}
    opt = _optimizer_arrays(state.main_opt, names, "main")
    opt.update(_optimizer_arrays(state.aux_opt, names, "aux"))
    return Checkpoint(
        state.model.structure(),
        {n: p.detach().numpy().copy() for n, p in state.model.named_parameters()},
        state.codebook.clone(),
        ctx.teacher,
        list(ctx.fishers),
        opt,
        meta,
    )


def _load_stage_dataset(plan: StagePlan) -> synthgen.StageDataset:
    if isinstance(plan.dataset, synthgen.StageDataset):
        return plan.dataset
    # looked up through the module so tests can record file access
    return synthgen.load_dataset(plan.dataset)


def _fisher_losses(model: CometModel, cb: UnifiedCodebook, ds: synthgen.StageDataset, ctx: StageContext, n: int, seed: int):
    """Yield per-example objective vectors (total loss minus the gate term); the chunk supplies CPC negatives."""
    rng = np.random.default_rng(derive_seed(seed, ctx.stage, "fisher"))
    order = rng.permutation(len(ds))[: min(n, len(ds))]
    bs = max(2, ctx.train.batch_size)
    chunks = [order[s : s + bs] for s in range(0, len(order), bs)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    for sel in chunks:
        if len(sel) < 2:
            raise ValueError("Fisher estimate needs at least two examples for contrastive negatives")
        fp = forward_losses(model, cb, torch.from_numpy(ds.xa[sel]), torch.from_numpy(ds.xb[sel]), replace(ctx, teacher=None))
        yield sum(fp.per_example.values())


@torch.no_grad()
def _initial_codebook(model: CometModel, ds: synthgen.StageDataset, mc: ModelConfig, seed: int, gamma: float) -> UnifiedCodebook:
    """Codes placed on untrained semantic features of a seeded sample (rows drawn without replacement)."""
    rng = np.random.default_rng(derive_seed(seed, "codebook-sample"))
    sel = rng.permutation(len(ds))[: min(64, len(ds))]
    zs = [model.semantic(torch.from_numpy(x[sel]), m)[0] for m, x in ((ds.mediator, ds.xa), (ds.partner, ds.xb))]
    flat = torch.cat(zs).reshape(-1, mc.d_code)
    if flat.shape[0] < mc.codebook_size:
        raise TrainingError(f"need at least {mc.codebook_size} feature rows to place the initial codes")
    rows = torch.from_numpy(rng.choice(flat.shape[0], mc.codebook_size, replace=False))
    return UnifiedCodebook.from_codes(flat[rows], gamma)


def run_stage(
    plan: StagePlan,
    prev: Checkpoint | None = None,
    metrics: list[dict] | None = None,
    cmcm_hook: Callable | None = None,
) -> Checkpoint:
    cfg = plan.train
    if plan.index >= 2 and prev is None:
        raise TrainingError(f"stage {plan.index} needs the previous stage's checkpoint")
    ds = _load_stage_dataset(plan)
    if ds.modalities != (plan.mediator, plan.partner):
        raise TrainingError(f"dataset pairs {ds.modalities}, plan expects {(plan.mediator, plan.partner)}")
    if prev is not None and prev.meta["mediator"] != plan.mediator:
        raise TrainingError(f"mediator changed from {prev.meta['mediator']} to {plan.mediator}")
    fingerprints = dict(prev.meta["fingerprints"]) if prev else {}
    for m, fp in ds.fingerprints.items():
        if fingerprints.setdefault(m, fp) != fp:
            raise TrainingError(f"modality {m} in {plan.dataset!r} was rendered differently in an earlier stage")

    if prev is None:
        mc = plan.model
        if not cfg.uses("moe"):
            mc = replace(mc, experts=1)
        model = CometModel(mc, plan.seed, use_specific=cfg.uses("sl"))
        model.add_modality(plan.mediator)
        model.add_modality(plan.partner)
        cb = _initial_codebook(model, ds, mc, plan.seed, cfg.gamma)
        teacher, fishers = None, []
    else:
        model = prev.build_model()
        cb, teacher = expand(prev.codebook, cfg.k2, derive_seed(plan.seed, plan.index, "expand"))
        model.add_modality(plan.partner)
        if cfg.uses("pm"):
            model.enable_replay()
        fishers = list(prev.fishers)
    cb.gamma = cfg.gamma

    ctx = StageContext(plan.index, plan.mediator, plan.partner, cfg, teacher, fishers, cmcm_hook)
    state = TrainState.create(model, cb, cfg.lr)
    xa_all, xb_all = torch.from_numpy(ds.xa), torch.from_numpy(ds.xb)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(plan.seed, plan.index, "epoch", epoch)).permutation(len(ds))
        for start in range(0, len(order), cfg.batch_size):
            sel = torch.from_numpy(order[start : start + cfg.batch_size])
            if sel.numel() < 2:
                continue
            parts, frac = train_step((xa_all[sel], xb_all[sel]), state, ctx)
            if metrics is not None:
                row = {"stage": plan.index, "epoch": epoch, "step": step}
                row.update({f"loss_{k}": parts[k] for k in BREAKDOWN_KEYS})
                row["teacher_fraction"] = frac
                metrics.append(row)
            step += 1

    if cfg.uses("ewc"):
        seen = [m for m in model.modalities]
        scope = select_scope(model.adapter, seen)
        params = {k: v for k, v in adapter_params(model).items() if k in scope}
        snap = estimate_fisher(params, _fisher_losses(model, cb, ds, ctx, cfg.fisher_samples, plan.seed), cfg.ewc_lambda, plan.index)
        ctx.fishers.append(snap)

    history = list(prev.meta["history"]) if prev else []
    history.append([plan.index, plan.mediator, plan.partner])
    meta = {
        "stage": plan.index,
        "seed": plan.seed,
        "config_hash": plan.config_hash(),
        "mediator": plan.mediator,
        "fingerprints": fingerprints,
        "history": history,
        "ablate": sorted(cfg.ablate),
        "k1": cb.frozen_prefix,
    }
    return snapshot(state, ctx, meta)


# ---------------------------------------------------------------- persistence


def _checkpoint_arrays(c: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"param/{k}", v) for k, v in c.params.items()]
    arrays += [
        ("codebook/codes", c.codebook.codes.numpy()),
        ("codebook/counts", c.codebook.counts.numpy()),
        ("codebook/volumes", c.codebook.volumes.numpy()),
    ]
    if c.teacher is not None:
        arrays.append(("teacher/codes", c.teacher.array))
    for i, snap in enumerate(c.fishers):
        for path in sorted(snap.fisher):
            arrays.append((f"fisher/{i}/F/{path}", snap.fisher[path].numpy()))
            arrays.append((f"fisher/{i}/anchor/{path}", snap.anchor[path].numpy()))
    arrays += [(f"opt/{k}", v) for k, v in c.optimizer.items()]
    return arrays


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def save_checkpoint(c: Checkpoint, path: str | Path) -> Path:
    arrays = _checkpoint_arrays(c)
    header = {
        "version": CKPT_VERSION,
        "structure": c.structure,
        "meta": c.meta,
        "codebook": {"gamma": c.codebook.gamma, "k1": c.codebook.frozen_prefix, "eps": c.codebook.eps, "K": c.codebook.size},
        "fishers": [{"lam": s.lam, "stage": s.stage} for s in c.fishers],
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    blob = CKPT_MAGIC + struct.pack("<Q", len(head)) + head + body
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob + _checksum(blob))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 24 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if _checksum(blob[:-8]) != blob[-8:]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n])
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('version')} != {CKPT_VERSION}")
    body = memoryview(blob)[16 + n : -8]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(body):
        raise CheckpointError(f"{path}: payload length mismatch")

    def take(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    cbh = header["codebook"]
    cb = UnifiedCodebook(
        torch.from_numpy(arrays["codebook/codes"]),
        torch.from_numpy(arrays["codebook/counts"]),
        torch.from_numpy(arrays["codebook/volumes"]),
        cbh["gamma"], cbh["k1"], cbh["eps"],
    )
    teacher = TeacherSnapshot(arrays["teacher/codes"]) if "teacher/codes" in arrays else None
    fishers = []
    for i, fh in enumerate(header["fishers"]):
        F = {k: torch.from_numpy(v) for k, v in take(f"fisher/{i}/F/").items()}
        A = {k: torch.from_numpy(v) for k, v in take(f"fisher/{i}/anchor/").items()}
        fishers.append(FisherSnapshot(F, A, fh["lam"], fh["stage"]))
    return Checkpoint(header["structure"], take("param/"), cb, teacher, fishers, take("opt/"), header["meta"])
