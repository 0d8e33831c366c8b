"""Acoustic-query attention over competing visual tracks.

For acoustic features ``A [B,T,240]`` and visual tracks ``V [N,T,Dv]``:

* ``Q = query_net(A)``: five SAME-padded conv1d layers, each followed by
  ReLU and then batch norm, ``[B,T,Dq]``;
* ``S[b,t,k] = Q[b,t,:] . (W V[k,t,:])``, the bilinear score ``[B,T,N]``;
* ``alpha = softmax_k(beta * S)``, attention over tracks;
* ``V'[b,t,:] = sum_k alpha[b,t,k] V[k,t,:]``, the gated features.

During training ``N == B`` and track ``b`` is the one matching stream ``b``.
At inference ``N`` is free (typically ``B = 1`` against ``N`` face tracks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from avtrack import backend
from avtrack import numeric as nm
from avtrack.numeric import INF, BatchNormState, Parameter, ShapeError

W_INIT_SCALE = 0.1


@dataclass(frozen=True)
class QueryNetConfig:
    channels: tuple = (240, 256, 256, 256, 512, 512)
    kernel: int = 5

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if len(self.channels) < 2:
            raise ValueError("need at least one layer")

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    @property
    def in_dim(self) -> int:
        return self.channels[0]

    @property
    def query_dim(self) -> int:
        return self.channels[-1]

    @property
    def receptive_field(self) -> int:
        """Input steps that can influence one output step (inference mode)."""
        return self.n_layers * (self.kernel - 1) + 1


def bilinear_score(Q, W, V, return_proj: bool = False):
    """``S[i,j,k] = sum_l Q[i,j,l] * (W @ V[k,j,:])[l]``, shape ``[B,T,N]``."""
    if Q.ndim != 3 or V.ndim != 3 or W.ndim != 2:
        raise ShapeError(f"bilinear_score expects Q[B,T,Dq], W[Dq,Dv], V[N,T,Dv]; got "
                         f"{Q.shape}, {W.shape}, {V.shape}")
    B, T, Dq = Q.shape
    N, Tv, Dv = V.shape
    if Tv != T:
        raise ShapeError(f"bilinear_score: time steps T differ, Q has {T}, V has {Tv}")
    if W.shape != (Dq, Dv):
        raise ShapeError(f"bilinear_score: W must be [Dq={Dq}, Dv={Dv}], got {list(W.shape)}")
    dt = nm._float_dtype(Q, W, V)
    Q = np.ascontiguousarray(Q, dtype=dt)
    V = np.ascontiguousarray(V, dtype=dt)
    w_t = np.ascontiguousarray(W.T, dtype=dt)
    proj = np.empty((N, T, Dq), dtype=dt)
    S = np.empty((B, T, N), dtype=dt)
    backend.active.bilinear_forward(Q, w_t, V, proj, S)
    return (S, proj) if return_proj else S


def bilinear_backward(Q, W, V, proj, dS):
    """Gradients of :func:`bilinear_score` w.r.t. ``Q``, ``W`` and ``V``."""
    dQ = np.einsum("ijk,kjl->ijl", dS, proj)
    dproj = np.einsum("ijk,ijl->kjl", dS, Q)
    Dq, Dv = W.shape
    dW = dproj.reshape(-1, Dq).T @ V.reshape(-1, Dv)
    dV = dproj @ W
    return dQ, dW, dV


def attention_weights(S, beta: float = 1.0):
    """Softmax of ``beta * S`` over the track axis; ``beta`` may be ``INF``."""
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    return nm.softmax_axis(S, axis=-1, beta=beta)


def gate(alpha, V):
    """``V'[b,t,:] = sum_i alpha[b,t,i] V[i,t,:]``.

    The per-track products are sorted before the sequential sum, so ``V'``
    does not depend on track order and a one-hot ``alpha`` returns the
    selected track bit for bit.
    """
    B, T, N = alpha.shape
    if V.ndim != 3 or V.shape[0] != N or V.shape[1] != T:
        raise ShapeError(f"gate: alpha {alpha.shape} needs V[N={N},T={T},Dv], got {V.shape}")
    terms = alpha[:, :, :, None] * V.transpose(1, 0, 2)[None]  # [B,T,N,Dv]
    return nm.seq_sum(np.sort(terms, axis=2), 2)


def gate_backward(alpha, V, dVp):
    d_alpha = np.einsum("btd,itd->bti", dVp, V)
    dV = np.einsum("bti,btd->itd", alpha, dVp)
    return d_alpha, dV


def concat_features(A, Vp):
    if A.ndim != 3 or Vp.ndim != 3 or A.shape[:2] != Vp.shape[:2]:
        raise ShapeError(f"concat_features: A {A.shape} and V' {Vp.shape} must share [B,T]")
    return np.concatenate([A, Vp], axis=-1)


def attention_entropy(alpha):
    """Shannon entropy (nats) of every ``alpha[b,t,:]`` row, with ``0 log 0 = 0``."""
    a = np.asarray(alpha)
    logs = np.log(np.where(a > 0, a, 1.0))
    return -(a * logs).sum(axis=-1)


class AttentionModel:
    """Trainable attention stack: query net parameters, batch-norm state and ``W``."""

    def __init__(self, config: QueryNetConfig = QueryNetConfig(), visual_dim: int = 512,
                 seed: int = 0, dtype=np.float64):
        self.config = config
        self.visual_dim = visual_dim
        self.dtype = np.dtype(dtype)
        rng = nm.make_rng(seed, "attention-init")
        params = []
        K = config.kernel
        for layer in range(1, config.n_layers + 1):
            cin, cout = config.channels[layer - 1], config.channels[layer]
            params += [
                Parameter(f"query/conv{layer}/kernel",
                          rng.standard_normal((K, cin, cout)) * math.sqrt(2.0 / (K * cin))),
                Parameter(f"query/conv{layer}/bias", np.zeros(cout)),
                Parameter(f"query/bn{layer}/gamma", np.ones(cout)),
                Parameter(f"query/bn{layer}/beta", np.zeros(cout)),
            ]
        Dq = config.query_dim
        params.append(Parameter("bilinear/W", rng.standard_normal((Dq, visual_dim))
                                * (W_INIT_SCALE / math.sqrt(Dq * visual_dim))))
        for p in params:
            p.value = p.value.astype(self.dtype)
            p.grad = np.zeros_like(p.value)
        self.params = {p.name: p for p in params}
        self.bn_states = [BatchNormState.fresh(c, self.dtype) for c in config.channels[1:]]

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def __getitem__(self, name):
        return self.params[name].value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @property
    def W(self):
        return self.params["bilinear/W"].value

    def state_tensors(self) -> dict:
        """Parameters and running statistics as ``{name: array}``."""
        out = {name: p.value for name, p in self.params.items()}
        for layer, st in enumerate(self.bn_states, start=1):
            out[f"query/bn{layer}/running_mean"] = st.mean
            out[f"query/bn{layer}/running_var"] = st.var
        return out

    def load_state_tensors(self, tensors: dict):
        for name, p in self.params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint lacks parameter {name}")
            if tensors[name].shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != {p.value.shape}")
            p.value = np.array(tensors[name], dtype=self.dtype)
            p.grad = np.zeros_like(p.value)
        for layer, st in enumerate(self.bn_states, start=1):
            st.mean = np.array(tensors[f"query/bn{layer}/running_mean"], dtype=self.dtype)
            st.var = np.array(tensors[f"query/bn{layer}/running_var"], dtype=self.dtype)

    # -- forward / backward -------------------------------------------------

    def query_forward(self, A, mode: str = "infer", keep_cache: bool = False):
        """``[B,T,240] -> [B,T,Dq]``; train mode updates the running statistics."""
        cfg = self.config
        if A.ndim != 3 or A.shape[2] != cfg.in_dim:
            raise ShapeError(f"query_forward: acoustic feature dim must be {cfg.in_dim}, got shape {A.shape}")
        x = np.asarray(A, dtype=self.dtype)
        caches = []
        for layer in range(1, cfg.n_layers + 1):
            kernel = self[f"query/conv{layer}/kernel"]
            h = nm.conv1d(x, kernel, self[f"query/conv{layer}/bias"])
            r = nm.relu(h)
            y, bn_cache = nm.batch_norm(r, self.bn_states[layer - 1], mode,
                                        self[f"query/bn{layer}/gamma"], self[f"query/bn{layer}/beta"],
                                        return_cache=True)
            if keep_cache:
                caches.append((x, h, bn_cache))
            x = y
        return (x, caches) if keep_cache else x

    def query_backward(self, caches, dQ):
        """Accumulate query-net parameter gradients; returns the gradient w.r.t. ``A``."""
        g = dQ
        for layer in range(len(caches), 0, -1):
            x, h, bn_cache = caches[layer - 1]
            g, ggamma, gbeta = nm.batch_norm_backward(bn_cache, g)
            self.params[f"query/bn{layer}/gamma"].grad += ggamma
            self.params[f"query/bn{layer}/beta"].grad += gbeta
            g = g * (h > 0)
            g, gk, gb = nm.conv1d_backward(x, self[f"query/conv{layer}/kernel"], g)
            self.params[f"query/conv{layer}/kernel"].grad += gk
            self.params[f"query/conv{layer}/bias"].grad += gb
        return g

    def scores(self, A, V, mode: str = "infer"):
        return bilinear_score(self.query_forward(A, mode), self.W, V)

    def forward(self, A, V, beta: float = 1.0, mode: str = "infer"):
        """Returns ``(S, alpha, V')``."""
        S = self.scores(A, V, mode)
        alpha = attention_weights(S, beta)
        return S, alpha, gate(alpha, V)

    def backward_from_scores(self, cache, dS):
        """Backpropagate ``dS`` through the bilinear score and the query net.

        ``cache`` comes from :meth:`forward_cache`; returns ``(dA, dV)``.
        """
        Q, proj, V, q_caches = cache
        dQ, dW, dV = bilinear_backward(Q, self.W, V, proj, dS)
        self.params["bilinear/W"].grad += dW
        dA = self.query_backward(q_caches, dQ)
        return dA, dV

    def forward_cache(self, A, V, mode: str = "train"):
        """Scores plus everything :meth:`backward_from_scores` needs."""
        Q, q_caches = self.query_forward(A, mode, keep_cache=True)
        S, proj = bilinear_score(Q, self.W, V, return_proj=True)
        return S, (Q, proj, np.asarray(V, dtype=self.dtype), q_caches)


def hard_select(S):
    """Index of the best track per ``(b, t)``, lowest index on ties."""
    return np.argmax(S, axis=-1)


__all__ = [
    "QueryNetConfig", "AttentionModel", "bilinear_score", "bilinear_backward", "attention_weights",
    "gate", "gate_backward", "concat_features", "attention_entropy", "hard_select", "INF",
]
