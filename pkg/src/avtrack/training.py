"""Cross-entropy training of the attention stack with minibatch elements as competing tracks."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avtrack import numeric as nm
from avtrack import tensorio
from avtrack.attention import AttentionModel, QueryNetConfig, attention_entropy, attention_weights
from avtrack.frontend import IdentityFrontend, SyntheticTrackSpec, SyntheticWorld, synth_tracks
from avtrack.numeric import AdamState, NumericalError

LOG_FLOOR = 1e-30
LOG_COLUMNS = ("step", "lr", "loss", "diag_accuracy", "mean_entropy")
# Peak rate for the shortened schedule.  With B=8 the full-scale 1e-3 drives
# the scores into overconfidence and the loss climbs during the plateau.
DESK_PEAK_LR = 1.5e-4


# ---------------------------------------------------------------------------
# loss


def _check_alpha(alpha):
    a = np.asarray(alpha)
    if a.ndim != 3:
        raise ValueError(f"attention weights must be [B,T,N], got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError("attention weights must be finite and nonnegative")
    if np.any(np.abs(a.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("attention weight rows must sum to 1")
    return a


def ce_loss(alpha, truth=None) -> float:
    """Mean over (b, t) of ``-log alpha[b, t, truth_b]``, log floored at 1e-30.

    Without ``truth`` the target of stream ``b`` is track ``b`` (the diagonal),
    which needs ``N == B >= 2``.
    """
    a = _check_alpha(alpha)
    B, T, N = a.shape
    if truth is None:
        if N != B or B < 2:
            raise ValueError(f"diagonal cross entropy needs N == B >= 2, got B={B}, N={N}")
        truth = np.arange(B)
    picked = a[np.arange(B), :, np.asarray(truth)]  # [B, T]
    return float(np.mean(-np.log(np.maximum(picked, LOG_FLOOR))))


def ce_grad_scores(alpha, beta: float = 1.0):
    """``dL/dS = beta * (alpha - onehot_diag) / (B T)``."""
    B, T, N = alpha.shape
    g = np.array(alpha, dtype=np.float64)
    g[np.arange(B), :, np.arange(B)] -= 1.0
    return g * (beta / (B * T))


def diag_accuracy(alpha) -> float:
    B = alpha.shape[0]
    return float(np.mean(np.argmax(alpha, axis=-1) == np.arange(B)[:, None]))


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``peak``, constant until ``hold_until``, then exponential
    decay reaching ``peak * end_ratio`` at ``end_step`` (and staying there)."""

    peak: float = 1e-3
    warmup_steps: int = 32000
    hold_until: int = 60000
    end_step: int = 200000
    end_ratio: float = 0.01

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.hold_until < self.end_step:
            raise ValueError("need 0 < warmup_steps < hold_until < end_step")

    @classmethod
    def scaled(cls, divisor: float = 100, peak: float = DESK_PEAK_LR):
        return cls(peak=peak, warmup_steps=round(32000 / divisor), hold_until=round(60000 / divisor),
                   end_step=round(200000 / divisor))

    @property
    def end_value(self) -> float:
        return self.peak * self.end_ratio


def lr_at(step: int, sched: LrSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= sched.warmup_steps:
        return sched.peak * step / sched.warmup_steps
    if step <= sched.hold_until:
        return sched.peak
    if step <= sched.end_step:
        frac = (step - sched.hold_until) / (sched.end_step - sched.hold_until)
        return sched.peak * sched.end_ratio ** frac
    return sched.end_value


# ---------------------------------------------------------------------------
# data sources


class SyntheticPairs:
    """Matched (acoustic, visual) pairs from a :class:`SyntheticWorld`.

    Batch ``step`` is drawn from a generator seeded by ``(seed, purpose, step)``,
    so any step can be regenerated without replaying earlier ones.
    """

    def __init__(self, spec: SyntheticTrackSpec = SyntheticTrackSpec(), T: int = 20):
        self.spec = spec
        self.T = T
        self.world = SyntheticWorld(spec)

    def batch(self, step: int, B: int, seed: int, purpose: str = "train-batch"):
        rng = nm.make_rng(seed, purpose, step)
        z = self.world.sample_latent(rng, B, self.T)
        V, _ = synth_tracks(self.spec, z, 0, rng, self.world)
        return self.world.acoustic(z), V


class ArrayPairs:
    """Matched pairs held in memory (lists of ``[T_i, 240]`` / ``[T_i, Dv]`` arrays).

    Each batch draws ``B`` distinct samples and crops them to the shortest length.
    """

    def __init__(self, acoustic, visual):
        if len(acoustic) != len(visual):
            raise ValueError("acoustic and visual lists differ in length")
        self.acoustic = list(acoustic)
        self.visual = list(visual)

    def batch(self, step: int, B: int, seed: int, purpose: str = "train-batch"):
        if len(self.acoustic) < B:
            raise ValueError(f"need at least B={B} pairs, have {len(self.acoustic)}")
        rng = nm.make_rng(seed, purpose, step)
        idx = rng.choice(len(self.acoustic), size=B, replace=False)
        T = min(self.acoustic[i].shape[0] for i in idx)
        A = np.stack([self.acoustic[i][:T] for i in idx])
        V = np.stack([self.visual[i][:T] for i in idx])
        return A, V


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    max_len: int = 360
    schedule: LrSchedule = field(default_factory=LrSchedule.scaled)
    beta1: float = 0.9
    beta2: float = 0.98
    eval_batches: int = 8
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2 (cross entropy over competing tracks), got {self.batch}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)
    entropies: list = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_time: float = 0.0
    checksum: str = ""

    def rows(self):
        return list(zip(self.steps, self.lrs, self.losses, self.accuracies, self.entropies))


class TrainingAborted(NumericalError):
    def __init__(self, message, report: TrainReport, step: int):
        super().__init__(message)
        self.report = report
        self.step = step


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()[:16]


def _clip_grads(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total


def evaluate_pairs(model: AttentionModel, source, frontend, B: int, n_batches: int, seed: int) -> float:
    """Diagonal-argmax accuracy on fresh batches, batch norm in inference mode."""
    accs = []
    for i in range(n_batches):
        A, vin = source.batch(i, B, seed, purpose="final-eval")
        S = model.scores(A, frontend(vin), mode="infer")
        accs.append(diag_accuracy(S))
    return math.fsum(accs) / len(accs) if accs else float("nan")


def train_attention(config: TrainConfig, source, frontend=None, model: AttentionModel | None = None,
                    adam: AdamState | None = None, start_step: int = 0, on_step=None):
    """Run CE training from ``start_step`` up to ``config.steps``.

    Returns ``(model, adam, report)``.  Only the attention parameters and the
    query-net running statistics change; ``frontend`` is applied read-only.
    ``on_step(step, model, adam, report)`` is called after every update.
    Raises :class:`TrainingAborted` on a non-finite loss or gradient.
    """
    frontend = frontend or IdentityFrontend()
    model = model or AttentionModel(seed=nm.derive_seed(config.seed, "model-init"))
    adam = adam or AdamState(beta1=config.beta1, beta2=config.beta2)
    report = TrainReport()
    params = model.parameters()
    t0 = time.perf_counter()
    B = config.batch
    for step in range(start_step + 1, config.steps + 1):
        A, vin = source.batch(step, B, config.seed)
        if A.shape[1] > config.max_len:
            A, vin = A[:, :config.max_len], vin[:, :config.max_len]
        V = frontend(vin)
        model.zero_grad()
        S, cache = model.forward_cache(A, V, mode="train")
        if not np.all(np.isfinite(S)):
            raise TrainingAborted(f"non-finite scores at step {step}", report, step)
        alpha = attention_weights(S, 1.0)
        loss = ce_loss(alpha)
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss {loss} at step {step}", report, step)
        model.backward_from_scores(cache, ce_grad_scores(alpha))
        if config.weight_decay:
            for p in params:
                p.grad += config.weight_decay * p.value
        if config.grad_clip:
            _clip_grads(params, config.grad_clip)
        lr = lr_at(step, config.schedule)
        try:
            nm.adam_step(params, adam, lr)
        except NumericalError as exc:
            raise TrainingAborted(f"{exc} (loss {loss})", report, step) from exc
        report.steps.append(step)
        report.lrs.append(lr)
        report.losses.append(loss)
        report.accuracies.append(diag_accuracy(alpha))
        report.entropies.append(float(np.mean(attention_entropy(alpha))))
        if on_step is not None:
            on_step(step, model, adam, report)
    report.wall_time = time.perf_counter() - t0
    if config.eval_batches:
        report.final_accuracy = evaluate_pairs(model, source, frontend, B, config.eval_batches, config.seed)
    report.checksum = param_checksum(params)
    return model, adam, report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model: AttentionModel, adam: AdamState, step: int, config=None) -> str:
    tensors = dict(model.state_tensors())
    for name in sorted(adam.m):
        tensors[f"adam/m/{name}"] = adam.m[name]
        tensors[f"adam/v/{name}"] = adam.v[name]
    extra = {
        "kind": "attention-checkpoint",
        "step": int(step),
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "model": {"channels": list(model.config.channels), "kernel": model.config.kernel,
                  "visual_dim": model.visual_dim, "dtype": model.dtype.name},
        "config": config or {},
    }
    return tensorio.save_tensor_set(directory, tensors, extra)


def load_checkpoint(directory):
    """Returns ``(model, adam, step, manifest)``."""
    tensors, manifest = tensorio.load_tensor_set(directory)
    if manifest.get("kind") != "attention-checkpoint":
        raise ValueError(f"{Path(directory)}: not an attention checkpoint")
    m = manifest["model"]
    model = AttentionModel(QueryNetConfig(tuple(m["channels"]), m["kernel"]), m["visual_dim"],
                           dtype=np.dtype(m["dtype"]))
    model.load_state_tensors(tensors)
    a = manifest["adam"]
    adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    for name in model.params:
        if f"adam/m/{name}" in tensors:
            adam.m[name] = np.array(tensors[f"adam/m/{name}"])
            adam.v[name] = np.array(tensors[f"adam/v/{name}"])
    return model, adam, manifest["step"], manifest


def write_log(path, report: TrainReport, header: dict | None = None, append: bool = False):
    """Training log CSV: ``step,lr,loss,diag_accuracy,mean_entropy``."""
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode) as f:
        if mode == "w":
            if header is not None:
                f.write("# " + json.dumps(header, sort_keys=True) + "\n")
            f.write(",".join(LOG_COLUMNS) + "\n")
        for row in report.rows():
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
