"""Per-track 512-dim visual features.

Two sources:

* :class:`Vgg3dFrontend`, the frozen VGG-style 3D ConvNet (conv3d -> ReLU
  except on the last layer -> group norm -> optional 2x2 spatial max pool).
  Weights are He-normal from a fixed seed and never trained.
* :func:`synth_tracks`, a synthetic generator in which a matching track is a
  fixed random linear map of the acoustic latent, so selection difficulty can
  be dialled with ``noise_sigma`` and the distractor mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from avtrack import numeric as nm
from avtrack.features import A_FPS, ACOUSTIC_DIM
from avtrack.numeric import Parameter, ShapeError

VISUAL_DIM = 512
KERNEL = 3
MIN_SHIFT_STEPS = math.ceil(A_FPS)  # >= 1 s of acoustic steps


@dataclass(frozen=True)
class Vgg3dConfig:
    channels: tuple = (3, 64, 128, 256, 512, 512)
    strides: tuple = (2, 1, 1, 1, 1)
    pool_layers: frozenset = field(default_factory=lambda: frozenset({1, 2, 3, 5}))
    groups: int = 32
    input_size: int = 128

    def __post_init__(self):
        if len(self.strides) != len(self.channels) - 1:
            raise ValueError(f"{len(self.channels) - 1} layers need {len(self.channels) - 1} strides, "
                             f"got {len(self.strides)}")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"strides must be 1 or 2, got {self.strides}")
        if not set(self.pool_layers) <= set(range(1, self.n_layers + 1)):
            raise ValueError(f"pool_layers {sorted(self.pool_layers)} outside 1..{self.n_layers}")
        for c in self.channels[1:]:
            if c % self.groups:
                raise ValueError(f"channel count {c} not divisible by groups={self.groups}")

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    @property
    def out_dim(self) -> int:
        return self.channels[-1]


FULL_CONFIG = Vgg3dConfig()
# 32x32 input cannot reach 1x1 through this layer stack (valid inputs are
# 121..152), so the desk configuration keeps 128x128 and thins the channels.
DESK_CONFIG = Vgg3dConfig(channels=(3, 32, 32, 64, 64, 512))
TINY_CONFIG = Vgg3dConfig(channels=(3, 4, 4), strides=(1, 1), pool_layers=frozenset({1}),
                          groups=2, input_size=8)


def spatial_plan(config: Vgg3dConfig) -> list[int]:
    """Spatial side length after every conv and pool, starting with the input.

    Raises ``ValueError`` if a conv would see fewer than 3 pixels or a pool
    fewer than 2.
    """
    size = config.input_size
    if size < KERNEL:
        raise ValueError(f"input_size {size} smaller than kernel extent {KERNEL}")
    plan = [size]
    for layer, stride in enumerate(config.strides, start=1):
        if size < KERNEL:
            raise ValueError(f"layer {layer}: spatial size {size} < {KERNEL} before conv")
        size = nm.conv3d_output_size(size, stride, KERNEL)
        plan.append(size)
        if layer in config.pool_layers:
            if size < 2:
                raise ValueError(f"layer {layer}: spatial size {size} < 2 before pool")
            size //= 2
            plan.append(size)
    return plan


def time_receptive_field(config: Vgg3dConfig) -> int:
    return config.n_layers * (KERNEL - 1) + 1


class Vgg3dFrontend:
    """Frozen 3D ConvNet mapping ``[B,T,H,W,3]`` video to ``[B,T,C_last]`` features."""

    def __init__(self, config: Vgg3dConfig = DESK_CONFIG, seed: int = 0, params=None):
        self.config = config
        if params is None:
            params = self._init_params(config, seed)
        self.params = {p.name: p for p in params}
        for p in self.params.values():
            p.frozen = True
        self._check_shapes()

    @staticmethod
    def _init_params(config, seed):
        rng = nm.make_rng(seed, "vgg3d-init")
        params = []
        for layer in range(1, config.n_layers + 1):
            cin, cout = config.channels[layer - 1], config.channels[layer]
            std = math.sqrt(2.0 / (KERNEL ** 3 * cin))
            params += [
                Parameter(f"frontend/conv{layer}/kernel",
                          rng.standard_normal((KERNEL, KERNEL, KERNEL, cin, cout)) * std),
                Parameter(f"frontend/conv{layer}/bias", np.zeros(cout)),
                Parameter(f"frontend/norm{layer}/scale", np.ones(cout)),
                Parameter(f"frontend/norm{layer}/shift", np.zeros(cout)),
            ]
        return params

    def _check_shapes(self):
        cfg = self.config
        for layer in range(1, cfg.n_layers + 1):
            cin, cout = cfg.channels[layer - 1], cfg.channels[layer]
            expected = {
                f"frontend/conv{layer}/kernel": (KERNEL, KERNEL, KERNEL, cin, cout),
                f"frontend/conv{layer}/bias": (cout,),
                f"frontend/norm{layer}/scale": (cout,),
                f"frontend/norm{layer}/shift": (cout,),
            }
            for name, shape in expected.items():
                if name not in self.params:
                    raise ShapeError(f"missing frontend parameter {name}")
                if self.params[name].value.shape != shape:
                    raise ShapeError(f"{name}: shape {self.params[name].value.shape} != {shape}")

    def parameters(self):
        return list(self.params.values())

    def __call__(self, video):
        cfg = self.config
        plan = spatial_plan(cfg)
        if plan[-1] != 1:
            raise ShapeError(f"spatial plan {plan} does not end at 1x1")
        if video.ndim != 5 or video.shape[2:] != (cfg.input_size, cfg.input_size, cfg.channels[0]):
            raise ShapeError(f"video must be [B,T,{cfg.input_size},{cfg.input_size},{cfg.channels[0]}], "
                             f"got {video.shape}")

        def p(name):
            return self.params[f"frontend/{name}"].value

        x = video
        for layer in range(1, cfg.n_layers + 1):
            x = nm.conv3d(x, p(f"conv{layer}/kernel"), p(f"conv{layer}/bias"), cfg.strides[layer - 1])
            if layer != cfg.n_layers:
                x = nm.relu(x)
            x = nm.group_norm(x, cfg.groups, p(f"norm{layer}/scale"), p(f"norm{layer}/shift"))
            if layer in cfg.pool_layers:
                x = nm.maxpool_spatial(x)
        return x.reshape(x.shape[0], x.shape[1], x.shape[-1])


class IdentityFrontend:
    """Frontend for inputs that already are visual features (synthetic mode)."""

    def parameters(self):
        return []

    def __call__(self, features):
        return features


# ---------------------------------------------------------------------------
# synthetic tracks


@dataclass(frozen=True)
class SyntheticTrackSpec:
    latent_dim: int = 32
    noise_sigma: float = 0.0
    distractor_mode: str = "independent"
    seed: int = 0
    acoustic_dim: int = ACOUSTIC_DIM
    visual_dim: int = VISUAL_DIM

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.distractor_mode not in ("independent", "time-shifted"):
            raise ValueError(f"distractor_mode must be 'independent' or 'time-shifted', "
                             f"got {self.distractor_mode!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")


class SyntheticWorld:
    """The fixed random maps latent -> acoustic features and latent -> visual features.

    Both maps are drawn from ``spec.seed`` alone, so every dataset and
    training run built from the same spec lives in the same world.
    """

    def __init__(self, spec: SyntheticTrackSpec):
        self.spec = spec
        rng = nm.make_rng(spec.seed, "synthetic-maps")
        scale = 1.0 / math.sqrt(spec.latent_dim)
        self.acoustic_map = rng.standard_normal((spec.latent_dim, spec.acoustic_dim)) * scale
        self.visual_map = rng.standard_normal((spec.latent_dim, spec.visual_dim)) * scale

    def sample_latent(self, rng, *lead):
        """Latent vectors drawn uniformly on the sphere of radius ``sqrt(latent_dim)``.

        The fixed norm keeps features at unit variance and makes matched pairs
        strictly separable by a bilinear form: ``z.z = d > z.z'`` for ``z' != z``.
        """
        z = rng.standard_normal(tuple(lead) + (self.spec.latent_dim,))
        norm = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
        return z * (math.sqrt(self.spec.latent_dim) / norm)

    def acoustic(self, latent):
        return latent @ self.acoustic_map

    def visual(self, latent):
        return latent @ self.visual_map


def synth_tracks(spec: SyntheticTrackSpec, acoustic_latent, n_distractors: int = 0, rng=None,
                 world: SyntheticWorld | None = None):
    """Matching and distractor visual tracks for a batch of latents ``[B,T,latent_dim]``.

    Returns ``(matching [B,T,Dv], distractors [B,n_distractors,T,Dv])``.
    Independent distractors map fresh latents; time-shifted ones map the true
    latent circularly shifted by ``MIN_SHIFT_STEPS..T-MIN_SHIFT_STEPS`` steps.
    """
    world = world or SyntheticWorld(spec)
    rng = rng if rng is not None else nm.make_rng(spec.seed, "synthetic-tracks")
    z = np.asarray(acoustic_latent, dtype=np.float64)
    if z.ndim != 3 or z.shape[2] != spec.latent_dim:
        raise ShapeError(f"acoustic_latent must be [B,T,{spec.latent_dim}], got {z.shape}")
    B, T, _ = z.shape

    def noisy(v):
        if spec.noise_sigma > 0:
            v = v + spec.noise_sigma * rng.standard_normal(v.shape)
        return v

    matching = noisy(world.visual(z))
    if spec.distractor_mode == "independent":
        dz = world.sample_latent(rng, B, n_distractors, T)
    else:
        if n_distractors and T < 2 * MIN_SHIFT_STEPS:
            raise ValueError(f"time-shifted distractors need T >= {2 * MIN_SHIFT_STEPS}, got {T}")
        dz = np.empty((B, n_distractors, T, spec.latent_dim))
        for b in range(B):
            for j in range(n_distractors):
                s = int(rng.integers(MIN_SHIFT_STEPS, T - MIN_SHIFT_STEPS + 1))
                dz[b, j] = np.roll(z[b], s, axis=0)
    distractors = noisy(world.visual(dz))
    return matching, distractors
