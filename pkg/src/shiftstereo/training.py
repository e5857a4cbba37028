"""Supervised training: robust loss on both outputs, Adam, checkpoints.

The loss is the mean smooth-L1 penalty over valid pixels on the coarse
disparity plus ``lambda_weight`` times the same penalty on the refined
disparity. Pixels with non-finite ground truth, or truth at or above the
disparity cap, are excluded and contribute exactly zero gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .datasets import StereoSample
from .errors import (CheckpointFormatError, CheckpointShapeError,
                     CheckpointVersionError, ConfigError, ShapeError,
                     TrainingDiverged)
from .model import ModelConfig, ModelWeights, forward_tensors
from .tensor import Tape, Tensor, backward

smooth_l1 = ops.smooth_l1


@dataclass(frozen=True)
class LossConfig:
    lambda_weight: float = 1.25

    def __post_init__(self):
        if self.lambda_weight <= 0:
            raise ConfigError(f"lambda_weight must be positive, got {self.lambda_weight}")


def total_loss(coarse: Tensor, refined: Tensor, gt: np.ndarray, mask: np.ndarray,
               cfg: LossConfig = LossConfig(), max_disparity: float | None = None) -> Tensor:
    """Scalar loss of the two supervised outputs against the ground truth."""
    gt = np.asarray(gt, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if coarse.shape != refined.shape or coarse.shape[2:] != gt.shape or gt.shape != mask.shape:
        raise ShapeError(f"total_loss: extents differ (coarse {coarse.shape}, "
                         f"refined {refined.shape}, gt {gt.shape}, mask {mask.shape})")
    effective = mask & np.isfinite(gt)
    if max_disparity is not None:
        effective &= gt < max_disparity
    count = int(effective.sum())
    if count == 0:
        raise ShapeError("total_loss: no valid pixels under the mask")
    dtype = coarse.dtype
    gt_t = Tensor(np.where(effective, gt, 0.0)[None, None], dtype=dtype)
    mask_t = Tensor(effective.astype(dtype)[None, None])

    def term(pred: Tensor) -> Tensor:
        penalty = ops.smooth_l1(ops.sub(pred, gt_t))
        return ops.scalar_mul(ops.sum_all(ops.mul(penalty, mask_t)), 1.0 / count)

    return ops.add(term(coarse), ops.scalar_mul(term(refined), cfg.lambda_weight))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments, one pair of buffers per parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], state: AdamState,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """One in-place update; a missing gradient counts as zero."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter "
                             f"shape {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# data augmentation
# ---------------------------------------------------------------------------

def random_crop(sample: StereoSample, crop_h: int, crop_w: int,
                rng: np.random.Generator) -> StereoSample:
    """The same window cut from left, right, ground truth, and mask."""
    h, w = sample.height, sample.width
    if crop_h > h or crop_w > w:
        raise ShapeError(f"random_crop: crop {crop_h}x{crop_w} exceeds image {h}x{w}")
    oy = int(rng.integers(0, h - crop_h + 1))
    ox = int(rng.integers(0, w - crop_w + 1))
    return StereoSample(
        left=np.ascontiguousarray(sample.left[:, oy:oy + crop_h, ox:ox + crop_w]),
        right=np.ascontiguousarray(sample.right[:, oy:oy + crop_h, ox:ox + crop_w]),
        gt=np.ascontiguousarray(sample.gt[oy:oy + crop_h, ox:ox + crop_w]),
        valid=np.ascontiguousarray(sample.valid[oy:oy + crop_h, ox:ox + crop_w]),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DICC"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict | None = None
    adam: AdamState | None = None

    @classmethod
    def from_weights(cls, weights: ModelWeights, epoch: int = 0,
                     rng_state: dict | None = None,
                     adam: AdamState | None = None) -> "Checkpoint":
        return cls(config=weights.config,
                   params={k: v.data.copy() for k, v in weights.params.items()},
                   buffers={k: v.data.copy() for k, v in weights.buffers.items()},
                   epoch=epoch, rng_state=rng_state, adam=adam)


def _write_entry(f, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    tag = _DTYPE_TAGS[np.dtype(arr.dtype)]
    f.write(struct.pack("<B", tag))
    f.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    meta = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "adam": None if ckpt.adam is None else {
            "lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps, "t": ckpt.adam.t,
        },
    }
    entries: list[tuple[str, np.ndarray]] = []
    entries += [("p/" + k, v) for k, v in ckpt.params.items()]
    entries += [("b/" + k, v) for k, v in ckpt.buffers.items()]
    if ckpt.adam is not None:
        entries += [("m/" + k, v) for k, v in ckpt.adam.m.items()]
        entries += [("v/" + k, v) for k, v in ckpt.adam.v.items()]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)


def _need(f, n: int, path: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"{path}: truncated checkpoint "
                                    f"(wanted {n} bytes, got {len(data)})")
    return data


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        if _need(f, 4, path) != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", _need(f, 4, path))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"{path}: unsupported checkpoint version "
                                         f"{version} (expected {CHECKPOINT_VERSION})")
        (meta_len,) = struct.unpack("<I", _need(f, 4, path))
        try:
            meta = json.loads(_need(f, meta_len, path).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"{path}: garbled metadata block ({e})")
        (count,) = struct.unpack("<I", _need(f, 4, path))
        groups: dict[str, dict[str, np.ndarray]] = {"p": {}, "b": {}, "m": {}, "v": {}}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _need(f, 2, path))
            name = _need(f, name_len, path).decode("utf-8")
            (rank,) = struct.unpack("<B", _need(f, 1, path))
            extents = struct.unpack(f"<{rank}I", _need(f, 4 * rank, path))
            (tag,) = struct.unpack("<B", _need(f, 1, path))
            if tag not in _TAG_DTYPES:
                raise CheckpointFormatError(f"{path}: unknown scalar-type tag {tag}")
            dtype = _TAG_DTYPES[tag]
            size = int(np.prod(extents)) * dtype.itemsize
            arr = np.frombuffer(_need(f, size, path), dtype=dtype).reshape(extents)
            kind, _, base = name.partition("/")
            if kind not in groups or not base:
                raise CheckpointFormatError(f"{path}: malformed entry name {name!r}")
            groups[kind][base] = arr.astype(arr.dtype.newbyteorder("="))
        if f.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after last entry")
    config = ModelConfig.from_dict(meta["config"])
    adam = None
    if meta.get("adam") is not None:
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                         eps=a["eps"], t=a["t"], m=groups["m"], v=groups["v"])
    return Checkpoint(config=config, params=groups["p"], buffers=groups["b"],
                      epoch=meta["epoch"], rng_state=meta.get("rng_state"), adam=adam)


def load_weights(ckpt: Checkpoint, config: ModelConfig | None = None) -> ModelWeights:
    """Instantiate ModelWeights from a checkpoint, validating every name/shape."""
    config = config or ckpt.config
    weights = ModelWeights.initialize(config, seed=0)
    for store, saved in ((weights.params, ckpt.params), (weights.buffers, ckpt.buffers)):
        for name, tensor in store.items():
            if name not in saved:
                raise CheckpointShapeError(f"checkpoint is missing entry {name!r} "
                                           f"required by config")
            if saved[name].shape != tensor.data.shape:
                raise CheckpointShapeError(
                    f"checkpoint entry {name!r} has shape {saved[name].shape}, "
                    f"config expects {tensor.data.shape}")
            tensor.data = np.ascontiguousarray(saved[name], dtype=tensor.data.dtype)
        for name in saved:
            if name not in store:
                raise CheckpointShapeError(f"checkpoint entry {name!r} does not exist "
                                           f"in the configured model")
    return weights


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_epe: float

    def log_line(self) -> str:
        return f"epoch={self.epoch} loss={self.mean_loss:.6f} val_epe={self.val_epe:.6f}"


def _to_tensors(sample: StereoSample) -> tuple[Tensor, Tensor]:
    return Tensor(sample.left[None]), Tensor(sample.right[None])


def validation_epe(samples: list[StereoSample], weights: ModelWeights,
                   config: ModelConfig, mode: str = "parallel") -> float:
    """Pixel-weighted mean absolute error of the refined output."""
    total_err = 0.0
    total_count = 0
    for sample in samples:
        left, right = _to_tensors(sample)
        out = forward_tensors(left, right, weights, config, mode=mode, training=False)
        pred = out["refined"].data[0, 0]
        mask = sample.valid & np.isfinite(sample.gt) & (sample.gt < config.max_disparity)
        n = int(mask.sum())
        if n == 0:
            continue
        total_err += float(np.abs(pred[mask] - sample.gt[mask]).sum())
        total_count += n
    return total_err / total_count if total_count else float("nan")


def train(train_samples: list[StereoSample], config: ModelConfig,
          loss_cfg: LossConfig = LossConfig(), *, epochs: int, seed: int = 0,
          lr: float = 1e-3, val_samples: list[StereoSample] | None = None,
          crop: tuple[int, int] | None = None, mode: str = "parallel",
          checkpoint_path: str | None = None, log_path: str | None = None,
          context_only: bool = False,
          progress: callable | None = None) -> tuple[ModelWeights, Checkpoint, list[EpochStats]]:
    """Deterministic training run: a pure function of (data, config, seed).

    Per epoch: shuffled iteration, optional random crop, forward in the
    requested mode, supervised loss on both outputs, backward, Adam step.
    Checkpoints are written every epoch (plus ``.best`` on validation
    improvement). A non-finite loss aborts with TrainingDiverged.
    """
    if not train_samples:
        raise ConfigError("train: empty dataset")
    weights = ModelWeights.initialize(config, seed=seed)
    adam = AdamState.for_params(weights.params, lr=lr)
    data_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xDA7A)))
    stats: list[EpochStats] = []
    best_val = float("inf")

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint.from_weights(weights, epoch=epoch,
                                       rng_state=data_rng.bit_generator.state,
                                       adam=adam)

    ckpt = snapshot(0)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)

    for epoch in range(1, epochs + 1):
        order = data_rng.permutation(len(train_samples))
        losses = []
        for idx in order:
            sample = train_samples[int(idx)]
            if crop is not None:
                sample = random_crop(sample, crop[0], crop[1], data_rng)
            left, right = _to_tensors(sample)
            with Tape() as tape:
                out = forward_tensors(left, right, weights, config, mode=mode,
                                      training=True, context_only=context_only)
                loss = total_loss(out["coarse"], out["refined"], sample.gt,
                                  sample.valid, loss_cfg,
                                  max_disparity=config.max_disparity)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}",
                    checkpoint_path=checkpoint_path)
            backward(loss, tape)
            adam_step(weights.params, adam)
            weights.zero_grads()
            losses.append(value)
        val = validation_epe(val_samples, weights, config, mode) if val_samples \
            else float("nan")
        entry = EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)), val_epe=val)
        stats.append(entry)
        if log_path:
            with open(log_path, "a") as f:
                f.write(entry.log_line() + "\n")
        if progress is not None:
            progress(entry)
        ckpt = snapshot(epoch)
        if checkpoint_path:
            save_checkpoint(ckpt, checkpoint_path)
            if np.isfinite(val) and val < best_val:
                best_val = val
                save_checkpoint(ckpt, checkpoint_path + ".best")
    return weights, ckpt, stats
