"""Finite-difference verification of the full attention backward pass.

The checked objective is

    L = ce_loss(alpha) + mean(V' * R),   alpha = softmax(beta * S),  V' = gate(alpha, V)

with ``S`` the bilinear score of the query net output.  The second term routes
gradient through the gating path as well as through the scores; averaging it
keeps ``|L|`` near one so finite-difference roundoff stays small.  Every
parameter, the acoustic input ``A`` and the tracks ``V`` are checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from avtrack import numeric as nm
from avtrack.attention import AttentionModel, QueryNetConfig, attention_weights, gate, gate_backward
from avtrack.training import LOG_FLOOR, ce_loss

# Narrow layers keep one instance at a few hundred coordinates.
CHECK_CHANNELS = (6, 5, 4, 4, 3, 3)
CHECK_VISUAL_DIM = 5
TOLERANCE = 1e-4


@dataclass
class Instance:
    model: AttentionModel
    A: np.ndarray  # [B,T,Din]
    V: np.ndarray  # [B,T,Dv]
    R: np.ndarray  # [B,T,Dv]
    beta: float


def make_instance(seed: int, B: int = 3, T: int = 4, channels=CHECK_CHANNELS,
                  visual_dim: int = CHECK_VISUAL_DIM, beta: float | None = None) -> Instance:
    """Random instance; every parameter and input is drawn from U[-1, 1]."""
    if B < 2 or T < 1:
        raise ValueError(f"need B >= 2 and T >= 1, got B={B}, T={T}")
    rng = nm.make_rng(seed, "gradcheck")
    model = AttentionModel(QueryNetConfig(tuple(channels)), visual_dim, seed=seed)
    for p in model.parameters():
        p.value = rng.uniform(-1.0, 1.0, p.value.shape)
    A = rng.uniform(-1.0, 1.0, (B, T, channels[0]))
    V = rng.uniform(-1.0, 1.0, (B, T, visual_dim))
    R = rng.uniform(-1.0, 1.0, (B, T, visual_dim))
    if beta is None:
        beta = float(rng.uniform(0.5, 2.0))
    return Instance(model, A, V, R, beta)


def objective(inst: Instance, A=None, V=None) -> float:
    A = inst.A if A is None else A
    V = inst.V if V is None else V
    S = inst.model.scores(A, V, mode="train")
    alpha = attention_weights(S, inst.beta)
    gated = (gate(alpha, V) * inst.R).ravel()
    return ce_loss(alpha) + math.fsum(gated.tolist()) / gated.size


def analytic_grads(inst: Instance) -> dict:
    """``{name: gradient}`` for all parameters plus ``input/A`` and ``input/V``."""
    model = inst.model
    model.zero_grad()
    S, cache = model.forward_cache(inst.A, inst.V, mode="train")
    alpha = attention_weights(S, inst.beta)
    B, T, N = alpha.shape
    d_alpha = np.zeros_like(alpha)
    diag = alpha[np.arange(B), :, np.arange(B)]
    d_alpha[np.arange(B), :, np.arange(B)] = -1.0 / (B * T * np.maximum(diag, LOG_FLOOR))
    d_alpha_gate, dV_gate = gate_backward(alpha, inst.V, inst.R / inst.R.size)
    dS = nm.softmax_backward(alpha, d_alpha + d_alpha_gate, axis=-1, beta=inst.beta)
    dA, dV_score = model.backward_from_scores(cache, dS)
    grads = {p.name: p.grad.copy() for p in model.parameters()}
    grads["input/A"] = dA
    grads["input/V"] = dV_score + dV_gate
    return grads


def numeric_grads(inst: Instance, h: float = 1e-5) -> dict:
    out = {}
    for p in inst.model.parameters():
        saved = p.value

        def f(x, p=p):
            p.value = x
            return objective(inst)

        out[p.name] = nm.finite_diff_grad(f, saved, h)
        p.value = saved
    out["input/A"] = nm.finite_diff_grad(lambda x: objective(inst, A=x), inst.A, h)
    out["input/V"] = nm.finite_diff_grad(lambda x: objective(inst, V=x), inst.V, h)
    return out


@dataclass
class CheckResult:
    seed: int
    max_rel_err: float
    worst: str  # tensor with the largest error
    coordinates: int
    elementwise: float  # max_rel_error over single components, for diagnosis


def check_instance(inst: Instance, seed: int = 0, h: float = 1e-5) -> CheckResult:
    a = analytic_grads(inst)
    n = numeric_grads(inst, h)
    errs = {name: nm.tensor_rel_error(a[name], n[name]) for name in a}
    worst = max(errs, key=lambda k: errs[k])
    elementwise = max(nm.max_rel_error(a[name], n[name]) for name in a)
    return CheckResult(seed, errs[worst], worst, sum(v.size for v in a.values()), elementwise)


def run_gradcheck(seed: int = 0, instances: int = 20, B: int = 3, T: int = 4, h: float = 1e-5):
    """Check ``instances`` random instances; instance ``i`` uses sub-seed ``(seed, i)``."""
    results = []
    for i in range(instances):
        sub = nm.derive_seed(seed, "gradcheck-instance", i)
        results.append(check_instance(make_instance(sub, B, T), sub, h))
    return results
