"""Multi-track evaluation: dataset construction, selection scoring, temperature sweeps, heatmaps.

A multi-track sample pairs one acoustic stream with ``N`` candidate visual
tracks, exactly one of which (``truth_index``) was produced by the same
speaker.  Datasets are stored compactly: the base matched pairs once, plus
for every sample and slot the base index the track comes from and a start
offset.  Track ``k`` of sample ``i`` at step ``t`` is base visual
``sources[i, k]`` at row ``(offsets[i, k] + t) mod L``, which covers cropping
(longer sources), looping (shorter sources) and circular time shifts.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avtrack import numeric as nm
from avtrack import tensorio
from avtrack.attention import attention_entropy, attention_weights
from avtrack.frontend import MIN_SHIFT_STEPS, SyntheticTrackSpec, SyntheticWorld
from avtrack.numeric import INF, ShapeError
from avtrack.training import LOG_FLOOR

VALID_N = (1, 2, 4, 8)
MODES = ("independent", "time-shifted")


@dataclass
class MultiTrackSample:
    acoustic: np.ndarray  # [T, 240]
    tracks: np.ndarray  # [N, T, Dv]
    truth_index: int

    def __post_init__(self):
        N = self.tracks.shape[0]
        if self.tracks.ndim != 3 or self.tracks.shape[1] != self.acoustic.shape[0]:
            raise ShapeError(f"tracks {self.tracks.shape} must be [N, T={self.acoustic.shape[0]}, Dv]")
        if not 0 <= self.truth_index < N:
            raise ValueError(f"truth_index {self.truth_index} outside [0, {N})")

    @property
    def N(self) -> int:
        return self.tracks.shape[0]

    @property
    def T(self) -> int:
        return self.acoustic.shape[0]


@dataclass
class BasePairs:
    """Matched ``(acoustic [L_i,240], visual [L_i,Dv])`` pairs of varying length."""

    acoustic: list
    visual: list

    def __post_init__(self):
        if len(self.acoustic) != len(self.visual):
            raise ValueError("acoustic and visual lists differ in length")
        for i, (a, v) in enumerate(zip(self.acoustic, self.visual)):
            if a.shape[0] != v.shape[0]:
                raise ShapeError(f"base pair {i}: acoustic has {a.shape[0]} steps, visual {v.shape[0]}")

    def __len__(self):
        return len(self.acoustic)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([a.shape[0] for a in self.acoustic], dtype=np.int64)


def make_base_pairs(spec: SyntheticTrackSpec, count: int, seed: int, t_min: int = 24,
                    t_max: int = 40) -> BasePairs:
    """``count`` synthetic matched pairs with lengths uniform in ``[t_min, t_max]``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 1 <= t_min <= t_max:
        raise ValueError(f"need 1 <= t_min <= t_max, got {t_min}, {t_max}")
    world = SyntheticWorld(spec)
    rng = nm.make_rng(seed, "base-pairs")
    acoustic, visual = [], []
    for _ in range(count):
        L = int(rng.integers(t_min, t_max + 1))
        z = world.sample_latent(rng, L)
        v = world.visual(z)
        if spec.noise_sigma > 0:
            v = v + spec.noise_sigma * rng.standard_normal(v.shape)
        acoustic.append(world.acoustic(z))
        visual.append(v)
    return BasePairs(acoustic, visual)


@dataclass
class MultiTrackDataset:
    base: BasePairs
    N: int
    seed: int
    sources: np.ndarray  # [S, N] int
    offsets: np.ndarray  # [S, N] int
    truth: np.ndarray  # [S] int
    mode: str = "independent"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S = len(self.truth)
        if self.sources.shape != (S, self.N) or self.offsets.shape != (S, self.N):
            raise ShapeError(f"sources/offsets must be [{S}, {self.N}], got "
                             f"{self.sources.shape} / {self.offsets.shape}")

    def __len__(self):
        return len(self.truth)

    def track(self, i: int, k: int) -> np.ndarray:
        T = self.base.acoustic[i].shape[0]
        src = self.base.visual[int(self.sources[i, k])]
        rows = (int(self.offsets[i, k]) + np.arange(T)) % src.shape[0]
        return src[rows]

    def __getitem__(self, i: int) -> MultiTrackSample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        tracks = np.stack([self.track(i, k) for k in range(self.N)])
        return MultiTrackSample(self.base.acoustic[i], tracks, int(self.truth[i]))

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    def _tensors(self) -> dict:
        return {
            "base/acoustic": np.concatenate(self.base.acoustic),
            "base/visual": np.concatenate(self.base.visual),
            "base/lengths": self.base.lengths,
            "sources": self.sources,
            "offsets": self.offsets,
            "truth": self.truth,
        }

    @property
    def checksum(self) -> str:
        h = hashlib.sha256(f"N={self.N};mode={self.mode}".encode())
        for name, arr in self._tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def save(self, directory, config=None) -> str:
        extra = {"kind": "multitrack-dataset", "N": self.N, "seed": self.seed, "mode": self.mode,
                 "count": len(self), "dataset_checksum": self.checksum, "meta": self.meta,
                 "config": config or {}}
        tensorio.save_tensor_set(directory, self._tensors(), extra)
        return self.checksum

    @classmethod
    def load(cls, directory) -> "MultiTrackDataset":
        tensors, manifest = tensorio.load_tensor_set(directory)
        if manifest.get("kind") != "multitrack-dataset":
            raise ValueError(f"{Path(directory)}: not a multi-track dataset")
        bounds = np.cumsum(tensors["base/lengths"])[:-1]
        base = BasePairs(np.split(tensors["base/acoustic"], bounds),
                         np.split(tensors["base/visual"], bounds))
        ds = cls(base, int(manifest["N"]), int(manifest["seed"]), tensors["sources"],
                 tensors["offsets"], tensors["truth"], manifest["mode"], manifest.get("meta", {}))
        if ds.checksum != manifest["dataset_checksum"]:
            raise ValueError(f"{Path(directory)}: dataset checksum mismatch")
        return ds


def min_shifted_length(N: int) -> int:
    """Shortest track that admits ``N - 1`` distinct shifts of at least one second."""
    return 2 * MIN_SHIFT_STEPS + N - 2 if N > 1 else 1


def build_multitrack(base: BasePairs, N: int, rng, mode: str = "independent",
                     seed: int = 0) -> MultiTrackDataset:
    """Attach ``N - 1`` distractor tracks to every base pair.

    Independent mode draws distractors from the other samples' matched tracks
    (distinct within a sample, independent across samples), cropping longer
    ones at a random start and looping shorter ones.  Time-shifted mode uses
    the sample's own visual track circularly shifted by at least one second.
    The truth slot is uniform over ``0..N-1``.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    S = len(base)
    lengths = base.lengths
    if mode == "independent" and S < N:
        raise ValueError(f"base has {S} pairs, need at least N={N}")
    if mode == "time-shifted" and int(lengths.min()) < min_shifted_length(N):
        raise ValueError(f"time-shifted distractors at N={N} need every base pair to have >= "
                         f"{min_shifted_length(N)} steps, shortest has {int(lengths.min())}")
    sources = np.empty((S, N), dtype=np.int64)
    offsets = np.zeros((S, N), dtype=np.int64)
    truth = np.empty(S, dtype=np.int64)
    for i in range(S):
        T = int(lengths[i])
        slot = int(rng.integers(N))
        truth[i] = slot
        others = [k for k in range(N) if k != slot]
        if mode == "independent":
            picks = rng.choice(S - 1, size=N - 1, replace=False)
            picks = picks + (picks >= i)  # skip the sample's own index
            for k, j in zip(others, picks):
                sources[i, k] = j
                L = int(lengths[j])
                offsets[i, k] = int(rng.integers(0, L - T + 1)) if L >= T else 0
        else:
            shifts = rng.choice(np.arange(MIN_SHIFT_STEPS, T - MIN_SHIFT_STEPS + 1),
                                size=N - 1, replace=False) if N > 1 else []
            for k, s in zip(others, shifts):
                sources[i, k] = i
                offsets[i, k] = int(s)
        sources[i, slot] = i
    return MultiTrackDataset(base, N, seed, sources, offsets, truth, mode)


def distractor_violations(ds: MultiTrackDataset) -> list:
    """``(sample, slot)`` pairs whose distractor equals the sample's matched track."""
    bad = []
    for i in range(len(ds)):
        sample = ds[i]
        matched = sample.tracks[sample.truth_index]
        for k in range(ds.N):
            if k != sample.truth_index and np.array_equal(sample.tracks[k], matched):
                bad.append((i, k))
    return bad


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    N: int
    beta: float
    frames: list  # per-sample frame count
    frame_correct: list  # per-sample count of frames where argmax alpha == truth
    utterance_correct: list  # per-sample 0/1, majority vote over frames
    entropy: list  # per-sample mean attention entropy (nats)
    ce: list  # per-sample mean -log alpha[truth]

    @property
    def frame_accuracy(self) -> float:
        return math.fsum(self.frame_correct) / math.fsum(self.frames)

    @property
    def sample_frame_accuracy(self) -> list:
        return [c / f for c, f in zip(self.frame_correct, self.frames)]

    @property
    def utterance_accuracy(self) -> float:
        return math.fsum(self.utterance_correct) / len(self.utterance_correct)

    @property
    def mean_entropy(self) -> float:
        return math.fsum(e * f for e, f in zip(self.entropy, self.frames)) / math.fsum(self.frames)

    @property
    def mean_ce(self) -> float:
        return math.fsum(c * f for c, f in zip(self.ce, self.frames)) / math.fsum(self.frames)

    def summary(self) -> dict:
        return {"N": self.N, "beta": _beta_str(self.beta), "samples": len(self.frames),
                "frame_accuracy": self.frame_accuracy, "utterance_accuracy": self.utterance_accuracy,
                "mean_entropy": self.mean_entropy, "mean_ce": self.mean_ce}


def _beta_str(beta: float) -> str:
    return "inf" if beta == INF else repr(float(beta))


def majority_vote(picks, N: int) -> int:
    """Most frequent track index, lowest index on ties."""
    return int(np.argmax(np.bincount(np.asarray(picks), minlength=N)))


def sample_scores(model, sample: MultiTrackSample, frontend=None) -> np.ndarray:
    """Scores ``[T, N]`` of one acoustic query (B=1) against all tracks."""
    if sample.tracks.shape[1] != sample.acoustic.shape[0]:
        raise ShapeError(f"tracks have {sample.tracks.shape[1]} steps, acoustic {sample.acoustic.shape[0]}")
    V = sample.tracks if frontend is None else frontend(sample.tracks)
    return model.scores(sample.acoustic[None], V, mode="infer")[0]


def report_from_scores(scores: list, truths, N: int, beta: float) -> EvalReport:
    frames, correct, utt, ent, ce = [], [], [], [], []
    for S, truth in zip(scores, truths):
        truth = int(truth)
        alpha = attention_weights(S[None], beta)[0]  # [T, N]
        picks = np.argmax(alpha, axis=-1)
        T = S.shape[0]
        frames.append(T)
        correct.append(int(np.sum(picks == truth)))
        utt.append(int(majority_vote(picks, N) == truth))
        ent.append(math.fsum(attention_entropy(alpha).tolist()) / T + 0.0)
        ce.append(math.fsum(-math.log(max(float(a), LOG_FLOOR)) for a in alpha[:, truth]) / T)
    return EvalReport(N, beta, frames, correct, utt, ent, ce)


def dataset_scores(model, ds: MultiTrackDataset, frontend=None) -> list:
    return [sample_scores(model, ds[i], frontend) for i in range(len(ds))]


def evaluate_selection(model, ds: MultiTrackDataset, beta: float = 1.0, frontend=None) -> EvalReport:
    return report_from_scores(dataset_scores(model, ds, frontend), ds.truth, ds.N, beta)


def sweep_beta(model, ds: MultiTrackDataset, betas, frontend=None) -> list:
    """``[(beta, EvalReport)]``; scores are computed once and reused for every beta."""
    betas = [float(b) for b in betas]
    if any(b < 0 or math.isnan(b) for b in betas):
        raise ValueError(f"betas must be nonnegative, got {betas}")
    scores = dataset_scores(model, ds, frontend)
    return [(b, report_from_scores(scores, ds.truth, ds.N, b)) for b in betas]


def hard_argmax_report(scores: list, truths, N: int) -> EvalReport:
    """Reference for ``beta = INF`` built from plain loops: pick the first
    strictly largest score, count it, and charge the floored log for misses."""
    frames, correct, utt, ent, ce = [], [], [], [], []
    miss_cost = -math.log(LOG_FLOOR)
    for S, truth in zip(scores, truths):
        truth = int(truth)
        T = len(S)
        picks = []
        for t in range(T):
            best = 0
            for k in range(1, N):
                if S[t][k] > S[t][best]:
                    best = k
            picks.append(best)
        hits = sum(1 for p in picks if p == truth)
        counts = [0] * N
        for p in picks:
            counts[p] += 1
        vote = max(range(N), key=lambda k: (counts[k], -k))
        frames.append(T)
        correct.append(hits)
        utt.append(int(vote == truth))
        ent.append(0.0)
        ce.append(math.fsum([miss_cost] * (T - hits) + [0.0] * hits) / T)
    return EvalReport(N, INF, frames, correct, utt, ent, ce)


REPORT_COLUMNS = ("sample", "truth", "frames", "frame_accuracy", "utterance_correct", "mean_entropy", "mean_ce")
CURVE_COLUMNS = ("beta", "frame_accuracy", "utterance_accuracy", "mean_entropy", "mean_ce")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report_csv(path, report: EvalReport, truths, header: dict | None = None):
    lines = [] if header is None else ["# " + _json_line(header)]
    lines.append(",".join(REPORT_COLUMNS))
    for i, (truth, f, c, u, e, l) in enumerate(zip(truths, report.frames, report.frame_correct,
                                                   report.utterance_correct, report.entropy, report.ce)):
        lines.append(",".join(_fmt(x) for x in (i, int(truth), f, c / f, u, float(e), float(l))))
    _write_text(path, "\n".join(lines) + "\n")


def write_curve_csv(path, curve, header: dict | None = None):
    lines = [] if header is None else ["# " + _json_line(header)]
    lines.append(",".join(CURVE_COLUMNS))
    for beta, rep in curve:
        lines.append(",".join([_beta_str(beta)] + [_fmt(x) for x in (
            rep.frame_accuracy, rep.utterance_accuracy, rep.mean_entropy, rep.mean_ce)]))
    _write_text(path, "\n".join(lines) + "\n")


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _write_text(path, text: str):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _write_bytes(path, data: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# heatmaps


def pgm_pixels(alpha) -> np.ndarray:
    """Map weights in ``[0, 1]`` to bytes: ``floor(255 a + 1/2)``."""
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("attention weights must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(alpha, comment: str | None = None) -> bytes:
    """Binary P5 greymap with one row per time step and one column per track."""
    pix = pgm_pixels(alpha)
    T, N = pix.shape
    head = "P5\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{N} {T}\n255\n"
    return head.encode("ascii") + pix.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height = int(tokens[1]), int(tokens[2])
    pos += 1  # single whitespace after maxval
    return np.frombuffer(data[pos:pos + width * height], dtype=np.uint8).reshape(height, width)


def export_attention(model, sample: MultiTrackSample, path, beta: float = 1.0, header: dict | None = None,
                     frontend=None):
    """Write ``path.csv`` (``t,track0..`` weights) and ``path.pgm``; returns alpha ``[T, N]``."""
    alpha = attention_weights(sample_scores(model, sample, frontend)[None], beta)[0]
    return write_attention(alpha, path, header, truth=sample.truth_index)


def write_attention(alpha, path, header: dict | None = None, truth: int | None = None):
    path = Path(path)
    T, N = alpha.shape
    info = dict(header or {})
    if truth is not None:
        info["truth_index"] = truth
    lines = ["# " + _json_line(info)] if info else []
    lines.append(",".join(["t"] + [f"track{k}" for k in range(N)]))
    for t in range(T):
        lines.append(",".join([str(t)] + [repr(float(a)) for a in alpha[t]]))
    _write_text(path.with_suffix(".csv"), "\n".join(lines) + "\n")
    _write_bytes(path.with_suffix(".pgm"), encode_pgm(alpha, _json_line(info) if info else None))
    return alpha
