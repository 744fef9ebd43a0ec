"""Registry of analytic-vs-finite-difference gradient checks, one group per module.

Each check builds a small random instance: a dict of float64 arrays and a
torch loss over them. Autograd supplies the analytic gradient; the numeric
gradient comes from central differences over forward evaluations only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
from torch.func import functional_call

from . import cmoe_adapter, encoders, ewc, numerics, objectives, pmr, quantizer
from .numerics import DTYPE, finite_difference_gradient, max_relative_error

TOLERANCE = 1e-4
Instance = tuple[dict[str, np.ndarray], Callable[[dict[str, torch.Tensor]], torch.Tensor]]


@dataclass(frozen=True)
class GradCheck:
    module: str
    name: str
    build: Callable[[np.random.Generator], Instance]

    @property
    def key(self) -> str:
        return f"{self.module}.{self.name}"


@dataclass
class CheckResult:
    key: str
    instances: int
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


REGISTRY: list[GradCheck] = []


def register(module: str, name: str):
    def deco(fn):
        REGISTRY.append(GradCheck(module, name, fn))
        return fn

    return deco


def _rand(rng: np.random.Generator, *shape, scale: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * scale


def _module_instance(module: torch.nn.Module, rng: np.random.Generator, extra: dict[str, np.ndarray], loss):
    """Randomize every parameter of ``module``; loss(module_params, all_tensors) -> scalar."""
    theta = {f"p:{n}": _rand(rng, *p.shape, scale=0.5) for n, p in module.named_parameters()}
    theta.update(extra)

    def f(t: dict[str, torch.Tensor]) -> torch.Tensor:
        return loss({k[2:]: v for k, v in t.items() if k.startswith("p:")}, t)

    return theta, f


def analytic_gradient(theta: dict[str, np.ndarray], f) -> dict[str, np.ndarray]:
    tensors = {k: torch.tensor(v, dtype=DTYPE, requires_grad=True) for k, v in theta.items()}
    out = f(tensors)
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    return {k: (g.numpy() if g is not None else np.zeros_like(theta[k])) for k, g in zip(tensors, grads)}


def numeric_gradient(theta: dict[str, np.ndarray], f, h: float = 1e-4) -> dict[str, np.ndarray]:
    def scalar(arrays):
        with torch.no_grad():
            return float(f({k: torch.from_numpy(v) for k, v in arrays.items()}))

    return finite_difference_gradient(scalar, theta, h)


def run_check(
    check: GradCheck,
    instances: int = 20,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    corrupt: Callable[[str, dict[str, np.ndarray]], dict[str, np.ndarray]] | None = None,
) -> CheckResult:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(numerics.derive_seed(seed, check.key, i))
        theta, f = check.build(rng)
        analytic = analytic_gradient(theta, f)
        if corrupt is not None:
            analytic = corrupt(check.key, analytic)
        worst = max(worst, max_relative_error(analytic, numeric_gradient(theta, f)))
    return CheckResult(check.key, instances, worst, tolerance)


def select(filters: Iterable[str] | None = None) -> list[GradCheck]:
    filters = [f for f in (filters or []) if f]
    if not filters:
        return list(REGISTRY)
    chosen = [c for c in REGISTRY if any(c.module == f or c.key == f for f in filters)]
    if not chosen:
        known = sorted({c.module for c in REGISTRY})
        raise KeyError(f"no gradient checks match {filters}; modules: {', '.join(known)}")
    return chosen


def run_all(filters=None, instances: int = 20, seed: int = 0, tolerance: float = TOLERANCE, corrupt=None) -> list[CheckResult]:
    return [run_check(c, instances, seed, tolerance, corrupt) for c in select(filters)]


# ---------------------------------------------------------------- numerics


@register("numerics", "affine")
def _affine(rng):
    theta = {"x": _rand(rng, 4), "W": _rand(rng, 3, 4), "b": _rand(rng, 3)}
    target = torch.from_numpy(_rand(rng, 3))
    return theta, lambda t: (torch.tanh(numerics.affine(t["x"], t["W"], t["b"])) * target).sum()


@register("numerics", "softmax")
def _softmax(rng):
    theta = {"v": _rand(rng, 3, 5, scale=2.0)}
    target = torch.from_numpy(_rand(rng, 3, 5))
    return theta, lambda t: (numerics.softmax(t["v"]) * target).sum() + numerics.log_softmax(t["v"])[:, 0].sum()


@register("numerics", "recurrence")
def _recurrence(rng):
    cell = numerics.GatedRecurrentCell(3, 4)
    target = torch.from_numpy(_rand(rng, 2, 5, 4))
    loss = lambda p, t: (functional_call(cell, p, (t["z"],)) * target).sum()  # noqa: E731
    return _module_instance(cell, rng, {"z": _rand(rng, 2, 5, 3)}, loss)


@register("numerics", "cross_attention")
def _attention(rng):
    theta = {"q": _rand(rng, 4, 3), "kv": _rand(rng, 5, 3)}
    target = torch.from_numpy(_rand(rng, 4, 3))
    return theta, lambda t: (numerics.cross_attention(t["q"], t["kv"]) * target).sum()


# ---------------------------------------------------------------- encoders


@register("encoders", "encode")
def _encode(rng):
    enc = encoders.ModalityEncoder("a", 5, 3, 2, hidden=4)
    x = torch.from_numpy(_rand(rng, 3, 5))

    def loss(p, t):
        h = functional_call(enc.front, _strip(p, "front."), (x,))
        zb = functional_call(enc.specific, _strip(p, "specific."), (x,))
        return (h**2).sum() + (zb**2).sum()

    return _module_instance(enc, rng, {}, loss)


@register("encoders", "decode_recon")
def _decode(rng):
    enc = encoders.ModalityEncoder("a", 5, 3, 2, hidden=4)
    x = torch.from_numpy(_rand(rng, 4, 5))

    def loss(p, t):
        dec = lambda inp: functional_call(enc.decoder, _strip(p, "decoder."), (inp,))  # noqa: E731
        x_hat = dec(torch.cat([t["e"], t["zb"]], dim=-1))
        return objectives.recon_loss(x_hat, x)

    return _module_instance(enc, rng, {"e": _rand(rng, 4, 3), "zb": _rand(rng, 4, 2)}, loss)


def _strip(params: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- cmoe_adapter


@register("cmoe_adapter", "mixture")
def _mixture(rng):
    adapter = cmoe_adapter.CMoEAdapter(3, n_experts=3)
    adapter.add_modality("a")
    adapter.add_modality("b")
    h = torch.from_numpy(_rand(rng, 2, 4, 3))
    target = torch.from_numpy(_rand(rng, 2, 4, 3))

    def loss(p, t):
        with _swapped(adapter, p):
            out = cmoe_adapter.adapter_forward(h, "a", adapter)
        return (out.z * target).sum() + cmoe_adapter.gate_load_loss(out.gates)

    return _module_instance(adapter, rng, {}, loss)


@register("cmoe_adapter", "gate_load")
def _gate(rng):
    theta = {"logits": _rand(rng, 6, 4)}
    return theta, lambda t: cmoe_adapter.gate_load_loss(numerics.softmax(t["logits"]))


class _swapped:
    """Temporarily replace a module's parameters with given tensors (keeps the graph)."""

    def __init__(self, module: torch.nn.Module, params: dict[str, torch.Tensor]):
        self.module, self.params, self.saved = module, params, {}

    def __enter__(self):
        for name, value in self.params.items():
            owner, attr = _owner(self.module, name)
            self.saved[name] = owner._parameters[attr]
            owner._parameters[attr] = value
        return self.module

    def __exit__(self, *exc):
        for name, value in self.saved.items():
            owner, attr = _owner(self.module, name)
            owner._parameters[attr] = value


def _owner(module: torch.nn.Module, path: str):
    *parents, attr = path.split(".")
    for p in parents:
        module = getattr(module, p) if not isinstance(module, (torch.nn.ModuleDict, torch.nn.ParameterDict)) else module[p]
    return module, attr


# ---------------------------------------------------------------- quantizer


@register("quantizer", "commitment")
def _commit(rng):
    codes = torch.from_numpy(_rand(rng, 6, 3))
    theta = {"z": _rand(rng, 2, 4, 3)}

    def f(t):
        idx, _ = quantizer.nearest(t["z"], codes)
        return quantizer.commitment_loss(t["z"], codes[idx], beta=0.25)

    return theta, f


# ---------------------------------------------------------------- objectives


@register("objectives", "club_bound")
def _club(rng):
    q = objectives.VariationalNet(3, 2, hidden=4)
    z = torch.from_numpy(_rand(rng, 3, 4, 3))
    loss = lambda p, t: _club_with(q, p, z, t["zb"])  # noqa: E731
    return _module_instance(q, rng, {"zb": _rand(rng, 3, 4, 2)}, loss)


def _club_with(q, params, z, zb):
    with _swapped(q, params):
        return objectives.club_upper_bound(z, zb, q)


@register("objectives", "club_aux_nll")
def _club_nll(rng):
    q = objectives.VariationalNet(3, 2, hidden=4)
    z = torch.from_numpy(_rand(rng, 6, 3))
    zb = torch.from_numpy(_rand(rng, 6, 2))

    def loss(p, t):
        with _swapped(q, p):
            return objectives.club_aux_nll(z, zb, q)

    return _module_instance(q, rng, {}, loss)


@register("objectives", "cross_cpc")
def _cpc(rng):
    theta = {"ctx": _rand(rng, 3, 5, 3), "z": _rand(rng, 3, 5, 2), "W": _rand(rng, 2, 2, 3, scale=0.5)}
    weights = torch.from_numpy(rng.uniform(0.1, 1.0, size=(3, 5)))
    return theta, lambda t: objectives.cross_cpc_batch(t["ctx"], t["z"], t["W"]) + objectives.cross_cpc_batch(
        t["ctx"], t["z"], t["W"], weights
    )


@register("objectives", "info_nce")
def _nce(rng):
    theta = {"logits": _rand(rng, 3, 5, scale=2.0)}
    return theta, lambda t: objectives.info_nce(t["logits"], positive=2).sum()


@register("objectives", "recon")
def _recon(rng):
    x = torch.from_numpy(_rand(rng, 3, 4))
    return {"x_hat": _rand(rng, 3, 4)}, lambda t: objectives.recon_loss(t["x_hat"], x)


# ---------------------------------------------------------------- ewc


@register("ewc", "penalty")
def _ewc(rng):
    F = {"a": torch.from_numpy(rng.uniform(0, 2, size=(3, 2))), "b": torch.from_numpy(rng.uniform(0, 2, size=(4,)))}
    anchor = {"a": torch.from_numpy(_rand(rng, 3, 2)), "b": torch.from_numpy(_rand(rng, 4))}
    snap = ewc.FisherSnapshot(F, anchor, lam=100.0)
    return {"a": _rand(rng, 3, 2), "b": _rand(rng, 4)}, lambda t: ewc.ewc_loss(t, snap)


# ---------------------------------------------------------------- pmr


@register("pmr", "replay_cpc")
def _replay(rng):
    B, T, D, C, K = 2, 5, 2, 2, 2
    head = objectives.CpcHead(K, C, D)
    cells = torch.nn.ModuleDict()
    for key in (pmr.PSEUDO, "a", "n"):
        head.add(key)
        cells[key] = numerics.GatedRecurrentCell(D, C, numerics.torch_generator(int(rng.integers(1 << 30)), key))
    from_teacher = torch.from_numpy(rng.random((B, T)) < 0.6)
    weights = torch.where(from_teacher, torch.tensor(1.0, dtype=DTYPE), torch.tensor(pmr.NEW_CODE_WEIGHT, dtype=DTYPE))
    emb = torch.from_numpy(_rand(rng, B, T, D))
    pseudo = pmr.PseudoSequence(torch.zeros(B, T, dtype=torch.int64), weights, from_teacher, emb)
    theta = {"za": _rand(rng, B, T, D), "zn": _rand(rng, B, T, D)}
    theta.update({f"W:{k}": _rand(rng, K, D, C, scale=0.5) for k in (pmr.PSEUDO, "a", "n")})

    def f(t):
        proj = {k[2:]: v for k, v in t.items() if k.startswith("W:")}
        return pmr.pmr_cpc_loss(pseudo, t["za"], t["zn"], proj, cells, "a", "n")

    return theta, f
