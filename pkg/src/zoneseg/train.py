"""Two-stage cascade training: deterministic, checkpointed, resumable.

Stage 1 learns the whole-prostate mask from the image alone; stage 2
learns the central gland from the image conditioned on a prostate mask
(ground-truth masks or frozen stage-1 predictions, per config).  Every
random draw comes from a stream derived from the master seed and a
purpose label, so two runs with equal configs produce bitwise-identical
weights and logs, and an interrupted run resumes exactly where it
stopped.

A run directory holds:

    run.cfg                  the full effective configuration
    checkpoint_stage{1,2}.ckpt   weights + optimizer state, per epoch
    trainlog_stage{1,2}.csv      one row per completed epoch
    stage{1,2}.mrwt          final weights, written when a stage finishes
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .cascade import (
    CascadeModel,
    CascadeVariant,
    compose_labels,
    get_variant,
    make_stage2_input,
    stage_configs,
)
from .config import RunConfig, crop_hw, load_config, serialize_config
from .dataset import SliceSample, load_slice_samples, read_manifest
from .errors import ConfigError, FormatError
from .metrics import ConfusionCounts, dice, structure_masks
from .model import (
    NetConfig,
    SegNet,
    _Reader,
    build_net,
    decode_entry,
    decode_weights,
    encode_entry,
    encode_weights,
    load_weights,
    save_weights,
)
from .optim import Adam
from .preprocess import apply_augment_image, apply_augment_labels, draw_augment_params
from .report import TrainLogEntry, write_trainlog_csv
from .rng import derive_rng

log = logging.getLogger(__name__)

OPTIMIZER_SECTION = b"ADAM"


# ------------------------------------------------------------- checkpoints


def encode_checkpoint(net: SegNet, adam: Adam, completed_epochs: int, seed: int) -> bytes:
    """Weight block followed by an optimizer section.

    The section is the marker b"ADAM", step count u64, completed epoch
    count u32, master seed u64, entry count u32, then the first and
    second moments as named-array entries ("m.<param>", "v.<param>") in
    parameter order.  Little-endian throughout, like the weight block.
    """
    parts = [
        encode_weights(net),
        OPTIMIZER_SECTION,
        struct.pack("<Q", adam.step_count),
        struct.pack("<I", completed_epochs),
        struct.pack("<Q", seed),
        struct.pack("<I", 2 * len(net.params)),
    ]
    for name in net.params:
        parts.append(encode_entry("m." + name, adam.m[name]))
        parts.append(encode_entry("v." + name, adam.v[name]))
    return b"".join(parts)


def decode_checkpoint(
    path, config: NetConfig, learning_rate: float
) -> tuple[SegNet, Adam, int, int]:
    """Restore (net, optimizer, completed_epochs, seed) from a checkpoint."""
    with open(path, "rb") as f:
        buf = f.read()
    reader = _Reader(buf, str(path))
    net = decode_weights(reader, config)
    marker = reader.take(4)
    if marker != OPTIMIZER_SECTION:
        raise FormatError(
            f"{path}: expected optimizer section {OPTIMIZER_SECTION!r} after "
            f"weights, found {marker!r}"
        )
    step_count = reader.u64()
    completed_epochs = reader.u32()
    seed = reader.u64()
    count = reader.u32()
    if count != 2 * len(net.params):
        raise FormatError(
            f"{path}: optimizer section has {count} entries, "
            f"config implies {2 * len(net.params)}"
        )
    adam = Adam(net.params, lr=learning_rate)
    seen = set()
    for _ in range(count):
        name, arr = decode_entry(reader)
        kind, _, pname = name.partition(".")
        if kind == "m" and pname in adam.m:
            target = adam.m[pname]
        elif kind == "v" and pname in adam.v:
            target = adam.v[pname]
        else:
            raise FormatError(f"{path}: unknown optimizer entry {name!r}")
        if name in seen:
            raise FormatError(f"{path}: duplicate optimizer entry {name!r}")
        seen.add(name)
        if target.shape != arr.shape:
            raise FormatError(
                f"{path}: optimizer entry {name!r} has shape {arr.shape}, "
                f"parameter implies {target.shape}"
            )
        target[...] = arr
    adam.step_count = step_count
    if reader.pos != len(buf):
        raise FormatError(
            f"{path}: {len(buf) - reader.pos} trailing bytes after checkpoint"
        )
    return net, adam, completed_epochs, seed


def _write_checkpoint(path: Path, net: SegNet, adam: Adam, completed: int, seed: int) -> None:
    blob = encode_checkpoint(net, adam, completed, seed)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _read_trainlog(path: Path) -> list[TrainLogEntry]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)  # header
        return [
            TrainLogEntry(
                epoch=int(row[0]),
                train_loss=float(row[1]),
                val_loss=float(row[2]),
                val_dice_prostate=float(row[3]),
                val_dice_cg=float(row[4]),
                val_dice_pz=float(row[5]),
                seconds=float(row[6]),
            )
            for row in reader
        ]


# ------------------------------------------------------------ batch helpers


def _shape_batches(order, samples: list[SliceSample], batch_size: int):
    """Split an index order into batches of stackable (equal-shape) slices."""
    batch: list[int] = []
    for idx in order:
        idx = int(idx)
        if batch and (
            len(batch) == batch_size
            or samples[batch[0]].image.shape != samples[idx].image.shape
        ):
            yield batch
            batch = []
        batch.append(idx)
    if batch:
        yield batch


def _onehot2(mask: np.ndarray) -> np.ndarray:
    """(2, h, w) one-hot planes [background, foreground] of a binary mask."""
    fg = mask.astype(np.float64)
    return np.stack([1.0 - fg, fg])


def _augmented(
    sample: SliceSample,
    cond_mask: np.ndarray | None,
    config: RunConfig,
    stage: int,
    epoch: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """The sample's (image, labels, conditioning mask) for one epoch.

    Each sample gets its own draw stream keyed by stage, absolute epoch,
    and sample id, so the transform is independent of batch composition
    and identical on resume.  The conditioning mask rides the exact
    transform applied to the labels.
    """
    img, lab = sample.image, sample.labels
    if not config.augmentation:
        return img, lab, cond_mask
    rng = derive_rng(config.seed, "augment", f"stage{stage}", f"epoch{epoch}", sample.sample_id)
    params = draw_augment_params(
        rng,
        max_rotation_deg=config.max_rotation_deg,
        max_translation_px=config.max_translation_px,
        flip_horizontal=config.flip_horizontal,
        flip_vertical=config.flip_vertical,
    )
    img = apply_augment_image(img, params)
    lab = apply_augment_labels(lab, params)
    if cond_mask is not None:
        cond_mask = apply_augment_labels(cond_mask, params)
    return img, lab, cond_mask


def _predict_masks(net: SegNet, samples: list[SliceSample], batch_size: int) -> dict[str, np.ndarray]:
    """Frozen stage-1 masks, one per sample id, from un-augmented slices."""
    masks: dict[str, np.ndarray] = {}
    for batch in _shape_batches(range(len(samples)), samples, batch_size):
        x = np.stack([samples[i].image[None] for i in batch])
        probs, _ = net.forward(x, train=False)
        pred = (probs[:, 1] > probs[:, 0]).astype(np.uint8)
        for j, i in enumerate(batch):
            masks[samples[i].sample_id] = pred[j]
    return masks


# -------------------------------------------------------------- epoch loop


def _train_epoch(
    stage: int,
    net: SegNet,
    adam: Adam,
    samples: list[SliceSample],
    cond: dict[str, np.ndarray] | None,
    variant: CascadeVariant,
    config: RunConfig,
    epoch: int,
) -> float:
    """One pass over the training slices; returns the mean batch loss
    weighted by batch size."""
    shuffle = derive_rng(config.seed, "shuffle", f"stage{stage}", f"epoch{epoch}")
    order = shuffle.permutation(len(samples))
    total = 0.0
    seen = 0
    for batch_index, batch in enumerate(_shape_batches(order, samples, config.batch_size)):
        xs = []
        hots = []
        for idx in batch:
            s = samples[idx]
            mask = cond[s.sample_id] if cond is not None else None
            img, lab, mask = _augmented(s, mask, config, stage, epoch)
            if stage == 1:
                xs.append(img[None])
                hots.append(_onehot2(lab > 0))
            else:
                # Ground-truth conditioning uses the (augmented) labels;
                # predicted conditioning uses the frozen stage-1 mask.
                m = mask if mask is not None else (lab > 0)
                xs.append(make_stage2_input(img, m, variant))
                hots.append(_onehot2(lab == 1))
        x = np.stack(xs)
        onehot = np.stack(hots)
        probs, tape = net.forward(x, train=True, update_stats=True)
        loss = ops.categorical_cross_entropy(probs, onehot)
        if not math.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss in stage {stage}, epoch {epoch}, batch {batch_index}"
            )
        net.backward(ops.categorical_cross_entropy_backward(probs, onehot), tape)
        adam.step()
        total += loss * len(batch)
        seen += len(batch)
    return total / seen


def _validate(
    stage: int,
    net: SegNet,
    samples: list[SliceSample],
    cond: dict[str, np.ndarray] | None,
    variant: CascadeVariant,
    config: RunConfig,
) -> tuple[float, float, float, float]:
    """Validation loss and pooled-count Dice per structure.

    Counts are pooled over every validation voxel before the Dice ratio
    is taken, so empty slices carry no special cases.  Stage 1 reports
    prostate Dice only; stage 2 composes full cascade labels from the
    frozen stage-1 masks and reports all three structures.
    """
    total = 0.0
    seen = 0
    pooled = {name: [0, 0, 0] for name in ("prostate", "central_gland", "peripheral_zone")}

    def tally(name: str, pred: np.ndarray, gt: np.ndarray) -> None:
        pooled[name][0] += int(np.count_nonzero(pred & gt))
        pooled[name][1] += int(np.count_nonzero(pred & ~gt))
        pooled[name][2] += int(np.count_nonzero(~pred & gt))

    for batch in _shape_batches(range(len(samples)), samples, config.batch_size):
        if stage == 1:
            x = np.stack([samples[i].image[None] for i in batch])
            onehot = np.stack([_onehot2(samples[i].labels > 0) for i in batch])
        else:
            x = np.stack(
                [
                    make_stage2_input(
                        samples[i].image, cond[samples[i].sample_id], variant
                    )
                    for i in batch
                ]
            )
            onehot = np.stack([_onehot2(samples[i].labels == 1) for i in batch])
        probs, _ = net.forward(x, train=False)
        total += ops.categorical_cross_entropy(probs, onehot) * len(batch)
        seen += len(batch)
        fg = probs[:, 1] > probs[:, 0]
        for j, i in enumerate(batch):
            if stage == 1:
                tally("prostate", fg[j], samples[i].labels > 0)
            else:
                composed = compose_labels(cond[samples[i].sample_id], fg[j])
                pred_masks = structure_masks(composed)
                gt_masks = structure_masks(samples[i].labels)
                for name in pooled:
                    tally(name, pred_masks[name], gt_masks[name])

    def pooled_dice(name: str) -> float:
        tp, fp, fn = pooled[name]
        return dice(ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=0))

    val_loss = total / seen
    if stage == 1:
        return val_loss, pooled_dice("prostate"), math.nan, math.nan
    return (
        val_loss,
        pooled_dice("prostate"),
        pooled_dice("central_gland"),
        pooled_dice("peripheral_zone"),
    )


def _train_stage(
    stage: int,
    net_config: NetConfig,
    variant: CascadeVariant,
    config: RunConfig,
    out_dir: Path,
    train_samples: list[SliceSample],
    val_samples: list[SliceSample],
    train_cond: dict[str, np.ndarray] | None,
    val_cond: dict[str, np.ndarray] | None,
) -> tuple[SegNet, list[TrainLogEntry]]:
    ckpt_path = out_dir / f"checkpoint_stage{stage}.ckpt"
    log_path = out_dir / f"trainlog_stage{stage}.csv"
    weights_path = out_dir / f"stage{stage}.mrwt"

    if ckpt_path.exists():
        net, adam, completed, stored_seed = decode_checkpoint(
            ckpt_path, net_config, config.learning_rate
        )
        if stored_seed != config.seed:
            raise ConfigError(
                f"{ckpt_path} was written with seed {stored_seed}, "
                f"config says {config.seed}"
            )
        entries = _read_trainlog(log_path)[:completed]
        log.info("stage %d: resuming after epoch %d", stage, completed)
    else:
        net = build_net(net_config, derive_rng(config.seed, "init", f"stage{stage}"))
        adam = Adam(net.params, lr=config.learning_rate)
        completed = 0
        entries = []

    for epoch in range(completed + 1, config.epochs + 1):
        t0 = time.perf_counter()
        train_loss = _train_epoch(
            stage, net, adam, train_samples, train_cond, variant, config, epoch
        )
        val_loss, d_pro, d_cg, d_pz = _validate(
            stage, net, val_samples, val_cond, variant, config
        )
        entry = TrainLogEntry(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            val_dice_prostate=d_pro,
            val_dice_cg=d_cg,
            val_dice_pz=d_pz,
            seconds=time.perf_counter() - t0,
        )
        entries.append(entry)
        write_trainlog_csv(entries, log_path)
        _write_checkpoint(ckpt_path, net, adam, epoch, config.seed)
        log.info(
            "stage %d epoch %d/%d: train %.4f val %.4f dice %.3f/%.3f/%.3f %.1fs",
            stage,
            epoch,
            config.epochs,
            train_loss,
            val_loss,
            d_pro,
            d_cg,
            d_pz,
            entry.seconds,
        )
    save_weights(net, weights_path)
    return net, entries


# -------------------------------------------------------------- run driver


@dataclass
class TrainResult:
    out_dir: Path
    cascade: CascadeModel
    stage1_entries: list[TrainLogEntry]
    stage2_entries: list[TrainLogEntry]


def _check_dims(samples: list[SliceSample], depth: int) -> None:
    div = 2**depth
    for s in samples:
        h, w = s.image.shape
        if h % div or w % div:
            raise ConfigError(
                f"slice dims {h}x{w} (subject {s.subject_id!r}) are not divisible "
                f"by 2^depth = {div}; regenerate the volumes with --dims multiples "
                f"of {div}, set crop to a multiple of {div}, or lower depth"
            )


def train_cascade(config: RunConfig, out_dir=None) -> TrainResult:
    """Train both stages into a run directory, resuming if one exists.

    An existing run directory must carry an identical run.cfg; anything
    else is refused rather than silently mixing configurations.
    """
    config = config.validate()
    if not config.manifest:
        raise ConfigError("training requires a manifest path")
    out_path = Path(out_dir if out_dir is not None else config.out)
    if str(out_path) == "" or str(out_path) == ".":
        raise ConfigError("training requires an output run directory")
    out_path.mkdir(parents=True, exist_ok=True)

    cfg_path = out_path / "run.cfg"
    text = serialize_config(config)
    if cfg_path.exists():
        stored = cfg_path.read_text(encoding="utf-8")
        if stored != text:
            raise ConfigError(
                f"{cfg_path} holds a different configuration; refusing to resume "
                f"(remove the run directory to start over)"
            )
    else:
        cfg_path.write_text(text, encoding="utf-8")

    records = read_manifest(config.manifest)
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise ConfigError("manifest has no records with split 'train'")
    if not val_recs:
        raise ConfigError("manifest has no records with split 'val'")
    chw = crop_hw(config)
    train_samples = load_slice_samples(train_recs, chw)
    val_samples = load_slice_samples(val_recs, chw)
    _check_dims(train_samples, config.depth)
    _check_dims(val_samples, config.depth)

    variant = get_variant(config.variant)
    cfg1, cfg2 = stage_configs(
        variant, config.depth, config.base_channels, config.use_norm, config.upsample
    )

    net1, entries1 = _train_stage(
        1, cfg1, variant, config, out_path, train_samples, val_samples, None, None
    )

    # Frozen stage-1 masks: validation always sees predicted masks (the
    # cascade's inference-time behaviour); training sees them only in
    # the "predicted" conditioning mode.
    val_cond = _predict_masks(net1, val_samples, config.batch_size)
    train_cond = None
    if config.stage2_conditioning == "predicted":
        train_cond = _predict_masks(net1, train_samples, config.batch_size)

    net2, entries2 = _train_stage(
        2, cfg2, variant, config, out_path, train_samples, val_samples, train_cond, val_cond
    )

    cascade = CascadeModel(
        stage1=net1,
        stage2=net2,
        variant=variant,
        crop_hw=chw,
        keep_largest_component=config.keep_largest_component,
    )
    return TrainResult(
        out_dir=out_path,
        cascade=cascade,
        stage1_entries=entries1,
        stage2_entries=entries2,
    )


def load_cascade(run_dir) -> tuple[CascadeModel, RunConfig]:
    """Rebuild the trained cascade from a finished run directory."""
    run_path = Path(run_dir)
    cfg_path = run_path / "run.cfg"
    if not cfg_path.exists():
        raise ConfigError(f"{run_path} is not a training run directory (no run.cfg)")
    config = load_config(cfg_path)
    variant = get_variant(config.variant)
    cfg1, cfg2 = stage_configs(
        variant, config.depth, config.base_channels, config.use_norm, config.upsample
    )
    paths = (run_path / "stage1.mrwt", run_path / "stage2.mrwt")
    for p in paths:
        if not p.exists():
            raise ConfigError(f"missing weights file {p}; training did not finish")
    net1 = load_weights(paths[0], cfg1)
    net2 = load_weights(paths[1], cfg2)
    cascade = CascadeModel(
        stage1=net1,
        stage2=net2,
        variant=variant,
        crop_hw=crop_hw(config),
        keep_largest_component=config.keep_largest_component,
    )
    return cascade, config
