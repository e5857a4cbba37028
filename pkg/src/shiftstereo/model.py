"""The four-stage stereo network.

Feature extraction at 1/3 resolution, a shared 2D matching network run
once per disparity shift (so every cost slice is a pure function of the
left features and the shifted right features), a projection layer that
turns the cost volume into a disparity and an entropy map, and an
entropy-guided refinement network on the full-resolution disparity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import HIGH, STANDARD, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``max_disparity`` is in full-resolution pixels and must be a multiple
    of 3; the cost volume holds ``max_disparity // 3`` levels at 1/3
    resolution. ``spp_pools`` lists (window, branch_channels) pairs; the
    fusion convolution consumes the pre-pool map plus all branches.
    """

    in_channels: int = 3
    feature_channels: int = 32
    max_disparity: int = 192
    matching_channels: tuple[int, int, int, int] = (48, 64, 96, 128)
    spp_pools: tuple[tuple[int, int], ...] = ((64, 32), (16, 32))
    dilations: tuple[int, int, int] = (2, 4, 8)
    refine_blocks: tuple[int, ...] = (1, 2, 4, 8, 1, 1)
    refine_channels: int = 32
    profile: str = "full"

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.feature_channels <= 0:
            raise ConfigError("feature_channels must be positive")
        if self.max_disparity <= 0 or self.max_disparity % 3 != 0:
            raise ConfigError(f"max_disparity must be a positive multiple of 3, "
                              f"got {self.max_disparity}")
        if len(self.matching_channels) != 4:
            raise ConfigError("matching_channels needs exactly 4 entries")
        if len(self.dilations) != 3:
            raise ConfigError("dilations needs exactly 3 entries")

    @property
    def levels(self) -> int:
        return self.max_disparity // 3

    @classmethod
    def tiny(cls, in_channels: int = 1, max_disparity: int = 24, **overrides) -> "ModelConfig":
        """Desk-scale profile for tests and the synthetic-stereogram run."""
        base = dict(
            in_channels=in_channels,
            feature_channels=16,
            max_disparity=max_disparity,
            matching_channels=(24, 32, 48, 64),
            spp_pools=((16, 16), (8, 16)),
            dilations=(2, 4, 8),
            refine_blocks=(1, 2, 4),
            refine_channels=32,
            profile="tiny",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, in_channels: int = 3, max_disparity: int = 192, **overrides) -> "ModelConfig":
        base = dict(in_channels=in_channels, max_disparity=max_disparity, profile="full")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["matching_channels"] = tuple(d["matching_channels"])
        d["spp_pools"] = tuple(tuple(p) for p in d["spp_pools"])
        d["dilations"] = tuple(d["dilations"])
        d["refine_blocks"] = tuple(d["refine_blocks"])
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer plus its optional normalization/activation."""

    name: str
    cin: int
    cout: int
    k: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    norm: bool = True
    act: bool = True
    per_sample_norm: bool = False
    zero_init: bool = False


def feature_layer_specs(cfg: ModelConfig) -> list[ConvSpec]:
    """The 8 feature-net convolutions: stride-3 downsampler, three dilated
    convs, one 1x1 per pooling branch, the fusion conv, and a bare 1x1."""
    f = cfg.feature_channels
    specs = [ConvSpec("feature.down", cfg.in_channels, f, 3, stride=3, padding=1)]
    for i, rate in enumerate(cfg.dilations, 1):
        specs.append(ConvSpec(f"feature.dil{i}", f, f, 3, dilation=rate, padding=rate))
    for i, (_, branch) in enumerate(cfg.spp_pools, 1):
        specs.append(ConvSpec(f"feature.spp{i}", f, branch, 1))
    fused = f + sum(branch for _, branch in cfg.spp_pools)
    specs.append(ConvSpec("feature.fuse", fused, fused, 3, padding=1))
    specs.append(ConvSpec("feature.out", fused, f, 1, norm=False, act=False))
    return specs


def matching_layer_specs(cfg: ModelConfig) -> list[ConvSpec]:
    """U-shaped matching net over one concatenated feature pair.

    Normalization inside the matching net is per-sample so that batching
    disparity levels together cannot couple them; this is what makes the
    cost of each shift a pure function of that shift in every mode.
    """
    two_f = 2 * cfg.feature_channels
    m = cfg.matching_channels
    specs = []
    prev = two_f
    for i, ch in enumerate(m, 1):
        specs.append(ConvSpec(f"matching.enc{i}", prev, ch, 3, stride=2, padding=1,
                              per_sample_norm=True))
        specs.append(ConvSpec(f"matching.filt{i}", ch, ch, 3, padding=1,
                              per_sample_norm=True))
        prev = ch
    skips = (m[2], m[1], m[0], two_f)
    outs = (m[2], m[1], m[0], m[0])
    prev = m[3]
    for i, (skip, out_ch) in enumerate(zip(skips, outs), 1):
        specs.append(ConvSpec(f"matching.dec{i}", prev + skip, out_ch, 3, padding=1,
                              per_sample_norm=True))
        prev = out_ch
    specs.append(ConvSpec("matching.out", m[0], 1, 3, padding=1, norm=False, act=False))
    return specs


def refine_layer_specs(cfg: ModelConfig) -> list[ConvSpec]:
    """Residual refinement over (image, normalized disparity, normalized entropy)."""
    r = cfg.refine_channels
    specs = [ConvSpec("refine.head", cfg.in_channels + 2, r, 3, padding=1)]
    for i, rate in enumerate(cfg.refine_blocks, 1):
        specs.append(ConvSpec(f"refine.block{i}.conv1", r, r, 3, dilation=rate, padding=rate))
        specs.append(ConvSpec(f"refine.block{i}.conv2", r, r, 3, dilation=rate, padding=rate,
                              act=False))
    specs.append(ConvSpec("refine.out", r, 1, 3, padding=1, norm=False, act=False,
                          zero_init=True))
    return specs


def all_layer_specs(cfg: ModelConfig) -> list[ConvSpec]:
    return feature_layer_specs(cfg) + matching_layer_specs(cfg) + refine_layer_specs(cfg)


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Learnable scalars per subnetwork (weights, biases, norm affine)."""
    sections = {"feature": feature_layer_specs(cfg),
                "matching": matching_layer_specs(cfg),
                "refine": refine_layer_specs(cfg)}
    counts = {}
    for section, specs in sections.items():
        total = 0
        for s in specs:
            total += s.cout * s.cin * s.k * s.k + s.cout
            if s.norm:
                total += 2 * s.cout
        counts[section] = total
    counts["total"] = sum(counts.values())
    return counts


class ModelWeights:
    """Named parameter and buffer tensors for the three subnetworks.

    One single matching-net parameter set serves all disparity levels;
    the cost-volume builder references it, never copies it.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 buffers: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.specs = {s.name: s for s in all_layer_specs(config)}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=STANDARD) -> "ModelWeights":
        """Fan-in-scaled uniform conv weights, zero biases, identity norms.

        The final refinement conv starts at zero so the refined output
        equals the clamped input disparity at initialization.
        """
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5157)))
        params: dict[str, Tensor] = {}
        buffers: dict[str, Tensor] = {}
        for s in all_layer_specs(config):
            shape = (s.cout, s.cin, s.k, s.k)
            if s.zero_init:
                w = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(s.cin * s.k * s.k)
                w = rng.uniform(-bound, bound, size=shape)
            params[s.name + ".w"] = Tensor(w, requires_grad=True, dtype=dtype)
            params[s.name + ".b"] = Tensor(np.zeros((1, s.cout, 1, 1)),
                                           requires_grad=True, dtype=dtype)
            if s.norm:
                params[s.name + ".gamma"] = Tensor(np.ones((1, s.cout, 1, 1)),
                                                   requires_grad=True, dtype=dtype)
                params[s.name + ".beta"] = Tensor(np.zeros((1, s.cout, 1, 1)),
                                                  requires_grad=True, dtype=dtype)
                buffers[s.name + ".mean"] = Tensor(np.zeros((1, s.cout, 1, 1)), dtype=dtype)
                buffers[s.name + ".var"] = Tensor(np.ones((1, s.cout, 1, 1)), dtype=dtype)
        return cls(config, params, buffers)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _block(x: Tensor, name: str, weights: ModelWeights, training: bool) -> Tensor:
    spec = weights.specs[name]
    out = ops.conv2d(x, weights.params[name + ".w"], weights.params[name + ".b"],
                     stride=spec.stride, dilation=spec.dilation, padding=spec.padding)
    if spec.norm:
        out = ops.batch_norm(out, weights.params[name + ".gamma"],
                             weights.params[name + ".beta"],
                             weights.buffers[name + ".mean"],
                             weights.buffers[name + ".var"],
                             training=training, per_sample=spec.per_sample_norm)
    if spec.act:
        out = ops.relu(out)
    return out


# ---------------------------------------------------------------------------
# feature net
# ---------------------------------------------------------------------------

def extract_features(image: Tensor, weights: ModelWeights, cfg: ModelConfig,
                     training: bool = False) -> Tensor:
    """Image (B, in_channels, H, W) -> features (B, F, ceil(H/3), ceil(W/3))."""
    b, c, h, w = image.shape
    if c != cfg.in_channels:
        raise ShapeError(f"extract_features: image has {c} channels, "
                         f"config expects {cfg.in_channels}")
    if h < 9 or w < 9:
        raise ShapeError(f"extract_features: image {h}x{w} is below the 9x9 minimum")
    x = _block(image, "feature.down", weights, training)
    for i in range(1, 4):
        x = _block(x, f"feature.dil{i}", weights, training)
    _, _, fh, fw = x.shape
    branches = [x]
    for i, (window, _) in enumerate(cfg.spp_pools, 1):
        p = ops.avg_pool(x, window, window, window, window)
        p = _block(p, f"feature.spp{i}", weights, training)
        branches.append(ops.bilinear_resize(p, fh, fw))
    fused = _block(ops.concat_channels(branches), "feature.fuse", weights, training)
    return ops.conv2d(fused, weights.params["feature.out.w"],
                      weights.params["feature.out.b"], padding=0)


# ---------------------------------------------------------------------------
# matching net and cost volume
# ---------------------------------------------------------------------------

def _matching_body(pair: Tensor, weights: ModelWeights, cfg: ModelConfig,
                   training: bool) -> Tensor:
    """(B, 2F, H', W') concatenated feature pair -> (B, 1, H', W') cost map."""
    _, c, h, w = pair.shape
    if c != 2 * cfg.feature_channels:
        raise ShapeError(f"matching net expects {2 * cfg.feature_channels} channels, got {c}")
    if min(h, w) < 16:
        raise ShapeError(f"matching net needs >= 16x16 at 1/3 resolution, got {h}x{w}")
    skips = [pair]
    x = pair
    for i in range(1, 5):
        x = _block(x, f"matching.enc{i}", weights, training)
        x = _block(x, f"matching.filt{i}", weights, training)
        skips.append(x)
    x = skips[4]
    for i, skip in enumerate((skips[3], skips[2], skips[1], skips[0]), 1):
        _, _, sh, sw = skip.shape
        x = ops.bilinear_resize(x, sh, sw)
        x = _block(ops.concat_channels([x, skip]), f"matching.dec{i}", weights, training)
    return ops.conv2d(x, weights.params["matching.out.w"],
                      weights.params["matching.out.b"], padding=1)


def shift_features(features: Tensor, d: int) -> Tensor:
    """Displace a feature map d columns to the right, zero-filling the gap."""
    return ops.shift_columns(features, d)


def compute_cost_map(left_features: Tensor, shifted_right_features: Tensor,
                     weights: ModelWeights, cfg: ModelConfig,
                     training: bool = False) -> Tensor:
    if left_features.shape != shifted_right_features.shape:
        raise ShapeError(f"compute_cost_map: feature shapes differ "
                         f"{left_features.shape} vs {shifted_right_features.shape}")
    pair = ops.concat_channels([left_features, shifted_right_features])
    return _matching_body(pair, weights, cfg, training)


def build_cost_volume(left_features: Tensor, right_features: Tensor,
                      weights: ModelWeights, cfg: ModelConfig,
                      mode: str = "parallel", training: bool = False,
                      context_only: bool = False) -> Tensor:
    """Cost volume (1, D/3, H', W'); slice d is the matching net applied to
    (left, right shifted by d).

    ``sequential`` runs one level at a time so activations of one level can
    be recycled; ``parallel`` batches all levels through the net at once.
    Both produce bit-identical volumes. ``context_only`` replaces the right
    features with shifted left features (the crippled control that cannot
    see the second view).
    """
    if mode not in ("sequential", "parallel"):
        raise ShapeError(f"build_cost_volume: unknown mode {mode!r}")
    b, _, _, fw = left_features.shape
    if b != 1:
        raise ShapeError("build_cost_volume: one image pair at a time (batch extent 1)")
    if left_features.shape != right_features.shape:
        raise ShapeError("build_cost_volume: left/right feature shapes differ")
    levels = cfg.levels
    if levels > fw:
        raise ShapeError(f"build_cost_volume: {levels} levels exceed feature width {fw}")
    source = left_features if context_only else right_features
    if mode == "sequential":
        slices = [compute_cost_map(left_features, shift_features(source, d),
                                   weights, cfg, training)
                  for d in range(levels)]
        return ops.concat_channels(slices)
    pairs = [ops.concat_channels([left_features, shift_features(source, d)])
             for d in range(levels)]
    out = _matching_body(ops.stack_batch(pairs), weights, cfg, training)
    return ops.batch_to_channels(out)


# ---------------------------------------------------------------------------
# projection layer
# ---------------------------------------------------------------------------

def soft_argmin(volume: Tensor) -> Tensor:
    """Expected disparity level under the softmax of negated costs."""
    probs = ops.softmax(ops.scalar_mul(volume, -1.0), axis=1)
    return ops.index_expectation(probs)


def entropy(volume: Tensor) -> Tensor:
    """Per-pixel Shannon entropy (nats) of the softmax cost distribution."""
    probs = ops.softmax(ops.scalar_mul(volume, -1.0), axis=1)
    return ops.channel_entropy(probs)


def _project(volume: Tensor) -> tuple[Tensor, Tensor]:
    probs = ops.softmax(ops.scalar_mul(volume, -1.0), axis=1)
    return ops.index_expectation(probs), ops.channel_entropy(probs)


def _upsample_tensors(disp_low: Tensor, ent_low: Tensor,
                      out_h: int, out_w: int) -> tuple[Tensor, Tensor]:
    """Resize to full resolution; disparity values convert from 1/3-resolution
    units to pixels (x3), entropy is resolution-independent."""
    disp = ops.scalar_mul(ops.bilinear_resize(disp_low, out_h, out_w), 3.0)
    ent = ops.bilinear_resize(ent_low, out_h, out_w)
    return disp, ent


# ---------------------------------------------------------------------------
# refine net
# ---------------------------------------------------------------------------

def refine(disp: Tensor, left_image: Tensor, ent: Tensor,
           weights: ModelWeights, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Residual correction of the disparity, clamped to be non-negative."""
    if disp.shape[2:] != left_image.shape[2:] or disp.shape[2:] != ent.shape[2:]:
        raise ShapeError(f"refine: extents differ (disp {disp.shape}, "
                         f"image {left_image.shape}, entropy {ent.shape})")
    ent_scale = math.log(cfg.levels) if cfg.levels > 1 else 1.0
    x = ops.concat_channels([
        left_image,
        ops.scalar_mul(disp, 1.0 / cfg.max_disparity),
        ops.scalar_mul(ent, 1.0 / ent_scale),
    ])
    x = _block(x, "refine.head", weights, training)
    for i in range(1, len(cfg.refine_blocks) + 1):
        y = _block(x, f"refine.block{i}.conv1", weights, training)
        y = _block(y, f"refine.block{i}.conv2", weights, training)
        x = ops.relu(ops.add(x, y))
    residual = ops.conv2d(x, weights.params["refine.out.w"],
                          weights.params["refine.out.b"], padding=1)
    return ops.relu(ops.add(disp, residual))


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class DisparityMap:
    """Full-resolution disparities in pixels plus a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    @classmethod
    def dense(cls, values: np.ndarray) -> "DisparityMap":
        return cls(np.asarray(values), np.ones(np.asarray(values).shape, dtype=bool))


@dataclass
class EntropyMap:
    """Per-pixel matching entropy in natural-log units."""

    values: np.ndarray


def upsample_outputs(disp: DisparityMap, ent: EntropyMap,
                     out_h: int, out_w: int) -> tuple[DisparityMap, EntropyMap]:
    """Map-level wrapper over the tensor upsampling used in the pipeline."""
    dt = Tensor(disp.values[None, None].astype(STANDARD))
    et = Tensor(ent.values[None, None].astype(STANDARD))
    d, e = _upsample_tensors(dt, et, out_h, out_w)
    return DisparityMap.dense(d.data[0, 0]), EntropyMap(e.data[0, 0])


def forward_tensors(left: Tensor, right: Tensor, weights: ModelWeights,
                    cfg: ModelConfig, mode: str = "parallel",
                    training: bool = False, context_only: bool = False) -> dict[str, Tensor]:
    """Run the full pipeline, returning all intermediate tensors by name."""
    if left.shape != right.shape:
        raise ShapeError(f"forward: image shapes differ {left.shape} vs {right.shape}")
    _, _, h, w = left.shape
    f_left = extract_features(left, weights, cfg, training)
    f_right = extract_features(right, weights, cfg, training)
    volume = build_cost_volume(f_left, f_right, weights, cfg, mode=mode,
                               training=training, context_only=context_only)
    disp_low, ent_low = _project(volume)
    coarse, ent_full = _upsample_tensors(disp_low, ent_low, h, w)
    refined = refine(coarse, left, ent_full, weights, cfg, training)
    return {"features_left": f_left, "features_right": f_right, "volume": volume,
            "coarse_low": disp_low, "entropy_low": ent_low,
            "coarse": coarse, "entropy": ent_full, "refined": refined}


def forward(left: Tensor, right: Tensor, weights: ModelWeights, cfg: ModelConfig,
            mode: str = "parallel") -> tuple[DisparityMap, DisparityMap, EntropyMap]:
    """Inference entry point: (coarse disparity, refined disparity, entropy)."""
    out = forward_tensors(left, right, weights, cfg, mode=mode, training=False)
    coarse = DisparityMap.dense(out["coarse"].data[0, 0].copy())
    refined = DisparityMap.dense(out["refined"].data[0, 0].copy())
    ent = EntropyMap(out["entropy"].data[0, 0].copy())
    return coarse, refined, ent
