"""Training loop, dataset access, and binary checkpoints.

Modes:

* ``full``: per iteration one supervised Adam step on a synthetic frame,
  then one self-supervised Adam step on an unlabeled real frame with its
  segment masks. Real label files are never read in this mode.
* ``syn-only``: supervised steps on synthetic frames only.
* ``real-labels``: supervised steps on real frames with their labels, an
  upper-bound reference that quantifies how much headroom adaptation has.

An exponential moving average of the parameters is refreshed after every
optimizer step and is what gets evaluated: after each epoch the EMA model is
scored on the held-out real test split, when one is configured.

Every random choice is derived from the run seed, so identical configs give
byte-identical checkpoints and metrics logs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .errors import ContractViolation, DataError
from .evaluation import miou_frame
from .losses import cross_entropy, real_loss
from .masks import MaskSet, load_mask_set
from .network import ForwardOut, ModelConfig, ModelParams, _layer_specs, ema_update, forward, init
from .scenegen import load_manifest
from . import netpbm

__all__ = [
    "TrainConfig",
    "FrameStore",
    "Checkpoint",
    "train",
    "evaluate_store",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

MODES = ("full", "syn-only", "real-labels")

CHECKPOINT_MAGIC = b"SRGC"
CHECKPOINT_VERSION = 1


def _u64(seed: int) -> int:
    return int(seed) & 0xFFFF_FFFF_FFFF_FFFF


@dataclass
class TrainConfig:
    mode: str
    out_dir: Path
    syn_dir: Path | None = None
    real_dir: Path | None = None
    masks_dir: Path | None = None
    real_test_dir: Path | None = None
    epochs: int = 30
    frames_per_epoch: int = 200
    alpha: float = 0.05
    margin: float = 0.5
    ema_decay: float = 0.99
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dense_dim: int = 3
    base_channels: int = 16
    fused_channels: int = 32
    hidden_channels: int = 16
    eval_last_k: int = 10

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.frames_per_epoch < 1:
            raise ContractViolation("epochs and frames_per_epoch must be >= 1")
        needed = {
            "full": ("syn_dir", "real_dir", "masks_dir"),
            "syn-only": ("syn_dir",),
            "real-labels": ("real_dir",),
        }[self.mode]
        for name in needed:
            if getattr(self, name) is None:
                raise ContractViolation(f"mode {self.mode} requires {name}")


class FrameStore:
    """Random access to a generated dataset directory, with caching.

    ``labels_allowed=False`` poisons the label accessor: any attempt to read
    ground truth through this store raises, which is how the trainer proves
    real annotations cannot influence adaptation.
    """

    def __init__(self, root, labels_allowed: bool = True, masks_dir=None):
        self.manifest = load_manifest(root)
        self.root = Path(root)
        self.labels_allowed = labels_allowed
        self.masks_dir = Path(masks_dir) if masks_dir is not None else None
        self._images: dict[int, np.ndarray] = {}
        self._labels: dict[int, np.ndarray] = {}
        self._masks: dict[int, MaskSet] = {}

    @property
    def frame_count(self) -> int:
        return self.manifest.frame_count

    @property
    def class_count(self) -> int:
        return self.manifest.class_count

    def frame_name(self, i: int) -> str:
        return self.manifest.frames[i].image

    def image(self, i: int) -> np.ndarray:
        img = self._images.get(i)
        if img is None:
            raw = netpbm.read_ppm(self.root / self.manifest.frames[i].image)
            img = np.ascontiguousarray(raw.transpose(2, 0, 1)).astype(np.float64) / 255.0
            self._images[i] = img
        return img

    def labels(self, i: int) -> np.ndarray:
        if not self.labels_allowed:
            raise ContractViolation(
                f"label access is forbidden on {self.root}; this store feeds "
                "unsupervised training only"
            )
        lab = self._labels.get(i)
        if lab is None:
            lab = netpbm.read_pgm(self.root / self.manifest.frames[i].labels).astype(np.int64)
            self._labels[i] = lab
        return lab

    def mask_set(self, i: int) -> MaskSet:
        ms = self._masks.get(i)
        if ms is None:
            if self.masks_dir is None:
                raise ContractViolation(f"no masks directory configured for {self.root}")
            ms = load_mask_set(self.masks_dir / self.manifest.frames[i].masks)
            if (ms.width, ms.height) != (self.manifest.width, self.manifest.height):
                raise DataError(
                    f"mask grid {ms.width}x{ms.height} does not match dataset "
                    f"{self.manifest.width}x{self.manifest.height}"
                )
            self._masks[i] = ms
        return ms


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    ema: ModelParams
    adam: AdamState
    epoch: int
    loss_log: list[dict] = field(default_factory=list)


def evaluate_store(params: ModelParams, store: FrameStore) -> float | None:
    """Dataset mIoU of argmax predictions; None if no frame is scorable."""
    values = []
    for i in range(store.frame_count):
        out: ForwardOut = forward(params, Tensor(store.image(i)), need_dense=False)
        pred = out.logits.data.argmax(axis=0)
        v = miou_frame(pred, store.labels(i), store.class_count)
        if v is not None:
            values.append(v)
    return float(np.mean(values)) if values else None


def train(config: TrainConfig) -> tuple[Checkpoint, list[dict]]:
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.mode == "full":
        sup_store = FrameStore(config.syn_dir)
        real_store = FrameStore(config.real_dir, labels_allowed=False, masks_dir=config.masks_dir)
    elif config.mode == "syn-only":
        sup_store = FrameStore(config.syn_dir)
        real_store = None
    else:  # real-labels
        sup_store = FrameStore(config.real_dir)
        real_store = None
    test_store = (
        FrameStore(config.real_test_dir) if config.real_test_dir is not None else None
    )

    model_config = ModelConfig(
        class_count=sup_store.class_count,
        dense_dim=config.dense_dim,
        base_channels=config.base_channels,
        fused_channels=config.fused_channels,
        hidden_channels=config.hidden_channels,
    )
    params = init(model_config, np.random.SeedSequence([_u64(config.seed), 0]))
    ema = params.copy()
    adam = AdamState.for_params(params.tensors())
    sample_rng = np.random.default_rng(np.random.SeedSequence([_u64(config.seed), 1]))
    param_list = params.tensors()

    def step(loss_tensor: Tensor, tape: Tape) -> None:
        grads = backward(tape, loss_tensor)
        # Params of a skipped head never reach the tape; their gradient is an
        # exact zero either way, and Adam must still see them (moments decay).
        adam_step(
            param_list,
            [grads[p] if p in grads else np.zeros_like(p.data) for p in param_list],
            adam,
            lr=config.lr,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )
        ema_update(ema, params, config.ema_decay)

    metrics: list[dict] = []
    for epoch in range(config.epochs):
        sup_idx = sample_rng.integers(0, sup_store.frame_count, size=config.frames_per_epoch)
        real_idx = (
            sample_rng.integers(0, real_store.frame_count, size=config.frames_per_epoch)
            if real_store is not None
            else None
        )
        sup_losses = []
        inv_losses = []
        var_losses = []
        for it in range(config.frames_per_epoch):
            i = int(sup_idx[it])
            with Tape() as tape:
                out = forward(params, Tensor(sup_store.image(i)), need_dense=False)
                loss = cross_entropy(out.logits, sup_store.labels(i))
            step(loss, tape)
            sup_losses.append(loss.item())

            if real_store is not None:
                j = int(real_idx[it])
                masks = real_store.mask_set(j)
                if len(masks.masks) >= 2:
                    with Tape() as tape:
                        out = forward(params, Tensor(real_store.image(j)), need_logits=False)
                        rloss, parts = real_loss(out.dense, masks, config.alpha, config.margin)
                    step(rloss, tape)
                    inv_losses.append(parts.invariance)
                    var_losses.append(parts.variance)
                else:
                    # no usable signal; the frame contributes zero loss and
                    # no optimizer step
                    inv_losses.append(0.0)
                    var_losses.append(0.0)

        record = {
            "epoch": epoch,
            "mean_sup_loss": float(np.mean(sup_losses)),
            "mean_inv_loss": float(np.mean(inv_losses)) if real_store is not None else None,
            "mean_var_loss": float(np.mean(var_losses)) if real_store is not None else None,
            "ema_miou": evaluate_store(ema, test_store) if test_store is not None else None,
        }
        metrics.append(record)

    checkpoint = Checkpoint(
        model_config=model_config,
        params=params,
        ema=ema,
        adam=adam,
        epoch=config.epochs,
        loss_log=metrics,
    )
    save_checkpoint(checkpoint, out_dir / "checkpoint.ckpt")
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for record in metrics:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return checkpoint, metrics


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "SRGC" | u32 version | u64 header length | JSON header | payload.
# The header's tensor directory lists name, shape and byte offset for every
# array; the payload is raw little-endian float64 in directory order. The
# header JSON is canonical (sorted keys, no whitespace), making save after
# load byte-identical.


def _directory(checkpoint: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"params.{n}", t.data) for n, t in checkpoint.params.items()]
    entries += [(f"ema.{n}", t.data) for n, t in checkpoint.ema.items()]
    names = checkpoint.params.names()
    entries += [(f"adam.m.{n}", a) for n, a in zip(names, checkpoint.adam.m, strict=True)]
    entries += [(f"adam.v.{n}", a) for n, a in zip(names, checkpoint.adam.v, strict=True)]
    return entries

def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    entries = _directory(checkpoint)
    directory = []
    offset = 0
    for name, arr in entries:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "model_config": {
            "class_count": checkpoint.model_config.class_count,
            "dense_dim": checkpoint.model_config.dense_dim,
            "base_channels": checkpoint.model_config.base_channels,
            "fused_channels": checkpoint.model_config.fused_channels,
            "hidden_channels": checkpoint.model_config.hidden_channels,
        },
        "epoch": checkpoint.epoch,
        "adam_step": checkpoint.adam.step,
        "loss_log": checkpoint.loss_log,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if 16 + header_len > len(data):
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[16 : 16 + header_len])
        model_config = ModelConfig(**header["model_config"])
        directory = header["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint header: {e}") from None
    payload = data[16 + header_len :]

    arrays: dict[str, np.ndarray] = {}
    for entry in directory:
        shape = tuple(int(v) for v in entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + size * 8
        if end > len(payload):
            raise DataError(f"{path}: truncated checkpoint payload at {entry['name']}")
        arrays[entry["name"]] = (
            np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
        )

    expected = [f"{name}.{kind}" for name, *_ in _layer_specs(model_config)
                for kind in ("weight", "bias")]
    for prefix in ("params", "ema", "adam.m", "adam.v"):
        for name in expected:
            if f"{prefix}.{name}" not in arrays:
                raise DataError(f"{path}: checkpoint is missing tensor {prefix}.{name}")

    params = ModelParams(
        {n: Tensor(arrays[f"params.{n}"], requires_grad=True) for n in expected}
    )
    ema = ModelParams({n: Tensor(arrays[f"ema.{n}"]) for n in expected})
    adam = AdamState(
        step=int(header["adam_step"]),
        m=[arrays[f"adam.m.{n}"] for n in expected],
        v=[arrays[f"adam.v.{n}"] for n in expected],
    )
    return Checkpoint(
        model_config=model_config,
        params=params,
        ema=ema,
        adam=adam,
        epoch=int(header["epoch"]),
        loss_log=list(header.get("loss_log", [])),
    )
