"""Training, evaluation, ablation sweeps, and attention-map export."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import checkpoint as CKPT
from . import head as H
from . import synth as S
from . import tensor as T
from .config import RunConfig, load_config
from .errors import DataError, UsageError
from .head import total_loss
from .model import GroundingModel
from .optim import AdamW, lr_at_epoch

logger = logging.getLogger(__name__)


def samples_to_arrays(samples: list[S.GroundingSample]):
    images = np.stack([s.image for s in samples])
    ids = np.stack([s.token_ids for s in samples])
    boxes = np.stack([s.box for s in samples])
    return images, ids, boxes


def load_arrays(data_dir, split):
    return samples_to_arrays(S.load_split(Path(data_dir), split))


def generate_dataset(cfg: RunConfig, out_dir) -> None:
    synth_cfg = S.SynthConfig(
        image_size=cfg.image_size, min_shapes=cfg.min_shapes, max_shapes=cfg.max_shapes,
        min_half=cfg.min_half, max_half=cfg.max_half,
        text_len=cfg.text_len, relation_prob=cfg.relation_prob, seed=cfg.seed,
        holdout_colors=cfg.holdout_color_list(), holdout_shapes=cfg.holdout_shape_list())
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test,
              "openvocab": cfg.n_openvocab}
    splits = S.generate_split(synth_cfg, counts)
    S.save_dataset(Path(out_dir), splits)


def evaluate_arrays(model: GroundingModel, images, ids, boxes, batch_size: int = 64):
    """Final-stage predictions over a frozen model; returns (accuracy, ious, preds)."""
    preds = []
    for lo in range(0, len(images), batch_size):
        out = model.forward(images[lo:lo + batch_size], ids[lo:lo + batch_size], train=False)
        preds.append(out[-1].data)
    preds = np.concatenate(preds)
    ious = H.iou_np(H.corners_np(preds), H.corners_np(boxes))
    return float((ious > 0.5).mean()), ious, preds


def _batches(n, batch_size, perm):
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def train_step(model: GroundingModel, opt: AdamW, images, ids, boxes) -> float:
    cfg = model.cfg
    model.zero_grad()
    with T.Tape() as tape:
        stage_boxes = model.forward(images, ids, train=True)
        loss = total_loss(stage_boxes, T.constant(boxes), cfg.effective_depth,
                          cfg.lambda_l1, cfg.lambda_giou)
        tape.backward(loss)
    opt.step()
    model.clamp_tau()
    return loss.item()


def run_train(cfg: RunConfig, log=logger.info) -> dict:
    """Full training loop; keeps the best-validation checkpoint."""
    data_dir = Path(cfg.data_dir)
    vocab = S.load_vocab(data_dir)
    tr_images, tr_ids, tr_boxes = load_arrays(data_dir, "train")
    val_images, val_ids, val_boxes = load_arrays(data_dir, "val")

    model = GroundingModel(cfg, len(vocab))
    opt = AdamW(model.parameters(), cfg.lr, betas=(cfg.beta1, cfg.beta2),
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng((cfg.seed, 555))

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    rows = ["epoch,loss,val_acc"]
    best_acc, best_epoch = -1.0, -1
    t0 = time.time()
    for epoch in range(cfg.epochs):
        opt.lr = lr_at_epoch(cfg.lr, epoch, cfg.decay_epoch)
        perm = shuffle_rng.permutation(len(tr_images))
        epoch_losses = []
        for idx in _batches(len(tr_images), cfg.batch_size, perm):
            epoch_losses.append(train_step(model, opt, tr_images[idx], tr_ids[idx], tr_boxes[idx]))
        val_acc, _, _ = evaluate_arrays(model, val_images, val_ids, val_boxes)
        mean_loss = float(np.mean(epoch_losses))
        rows.append(f"{epoch},{mean_loss!r},{val_acc!r}")
        log(f"epoch {epoch}: loss {mean_loss:.4f} val_acc {val_acc:.3f} "
            f"({time.time() - t0:.0f}s)")
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            save_run_state(out_dir / "best.ckpt", cfg, model, opt, epoch, shuffle_rng)
    save_run_state(out_dir / "last.ckpt", cfg, model, opt, cfg.epochs - 1, shuffle_rng)
    metrics_path.write_text("\n".join(rows) + "\n")
    return {"best_val_acc": best_acc, "best_epoch": best_epoch,
            "metrics": metrics_path, "checkpoint": out_dir / "best.ckpt",
            "model": model, "skipped_steps": opt.skipped,
            "wall_seconds": time.time() - t0}


# --- checkpoint plumbing ----------------------------------------------------

def _pack_entry(arrays: dict, name: str, payload: bytes):
    packed, nbytes = CKPT.pack_bytes(payload)
    arrays[f"{name}.data"] = packed
    arrays[f"{name}.nbytes"] = np.array([float(nbytes)])


def _unpack_entry(arrays: dict, name: str) -> bytes:
    return CKPT.unpack_bytes(arrays[f"{name}.data"], int(arrays[f"{name}.nbytes"][0]))


def save_run_state(path, cfg: RunConfig, model: GroundingModel, opt: AdamW,
                   epoch: int, rng: np.random.Generator) -> None:
    arrays = dict(model.state_arrays())
    arrays.update(opt.state_arrays())
    arrays["epoch"] = np.array([float(epoch)])
    _pack_entry(arrays, "config", cfg.to_json().encode())
    _pack_entry(arrays, "rng", json.dumps(rng.bit_generator.state).encode())
    CKPT.save_checkpoint(path, arrays)


def load_run_state(path):
    """Returns (cfg, arrays); callers rebuild the model and load into it."""
    arrays = CKPT.load_checkpoint(path)
    cfg = RunConfig.from_json(_unpack_entry(arrays, "config").decode())
    return cfg, arrays


def restore_model(path, vocab_size: int | None = None):
    cfg, arrays = load_run_state(path)
    if vocab_size is None:
        vocab_size = len(S.build_vocab())
    model = GroundingModel(cfg, vocab_size)
    model.load_state(arrays)
    return cfg, model, arrays


def run_eval(checkpoint_path, split: str, data_dir=None) -> dict:
    cfg, model, _ = restore_model(checkpoint_path)
    root = Path(data_dir or cfg.data_dir)
    images, ids, boxes = load_arrays(root, split)
    acc, ious, preds = evaluate_arrays(model, images, ids, boxes)
    return {"split": split, "n": len(images), "accuracy": acc,
            "mean_iou": float(ious.mean()), "preds": preds}


# --- ablation sweeps ---------------------------------------------------------

def parse_grid(spec: str) -> list[dict]:
    """'k=1,5;transform_mode=gaussian,laplacian' -> list of override dicts."""
    if not spec.strip():
        raise UsageError("empty ablation grid spec")
    axes = []
    defaults = RunConfig()
    for part in spec.split(";"):
        key, _, values = part.partition("=")
        key = key.strip()
        if not hasattr(defaults, key):
            raise UsageError(f"unknown config key in grid: {key!r}")
        target = type(getattr(defaults, key))
        parsed = []
        for v in values.split(","):
            v = v.strip()
            if target is bool:
                parsed.append(v.lower() in ("true", "1", "yes"))
            else:
                parsed.append(target(v))
        axes.append((key, parsed))
    rows = []
    for combo in itertools.product(*[vals for _, vals in axes]):
        rows.append({key: val for (key, _), val in zip(axes, combo)})
    return rows


def run_ablate(cfg: RunConfig, grid_spec: str, log=logger.info) -> list[dict]:
    """Train one short run per grid point and tabulate final validation accuracy."""
    rows = []
    overrides = parse_grid(grid_spec)
    keys = sorted({k for row in overrides for k in row})
    for i, over in enumerate(overrides):
        sub = dataclasses.replace(cfg, **over)
        sub = dataclasses.replace(sub, out_dir=str(Path(cfg.out_dir) / f"ablate_{i:03d}"))
        sub.validate()
        result = run_train(sub, log=lambda *_a, **_k: None)
        row = {**{k: over.get(k, getattr(cfg, k)) for k in keys},
               "val_acc": result["best_val_acc"]}
        rows.append(row)
        log(f"ablation {i + 1}/{len(overrides)}: {row}")
    table = format_table(rows, keys + ["val_acc"])
    out_path = Path(cfg.out_dir) / "ablation.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_lines = [",".join(keys + ["val_acc"])]
    csv_lines += [",".join(str(r[k]) for k in keys + ["val_acc"]) for r in rows]
    out_path.write_text("\n".join(csv_lines) + "\n")
    log("\n" + table)
    return rows


def format_table(rows: list[dict], columns: list[str]) -> str:
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    sep = "  ".join("-" * widths[c] for c in columns)
    body = ["  ".join(str(r[c]).ljust(widths[c]) for c in columns) for r in rows]
    return "\n".join([header, sep] + body)


# --- attention export --------------------------------------------------------

def write_pgm(path, values: np.ndarray) -> None:
    """Min-max normalized 8-bit binary PGM."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi - lo < 1e-12 else (v - lo) / (hi - lo)
    arr = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def run_export_attention(checkpoint_path, sample_ids: list[int], out_dir,
                         split: str = "val", data_dir=None) -> list[Path]:
    cfg, model, _ = restore_model(checkpoint_path)
    root = Path(data_dir or cfg.data_dir)
    samples = S.load_split(root, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    side = cfg.grid_side
    written = []
    for sid in sample_ids:
        if sid < 0 or sid >= len(samples):
            raise DataError(f"sample id {sid} outside split of {len(samples)}")
        sample = samples[sid]
        diag: dict = {}
        model.forward(sample.image[None], sample.token_ids[None], train=False, diag=diag)
        for stage_idx, stage_diag in enumerate(diag["stages"], start=1):
            att = stage_diag["vision_weights"].mean(axis=0)[0]  # heads averaged
            path = out_dir / f"{sid:05d}_{stage_idx}.pgm"
            write_pgm(path, att.reshape(side, side))
            written.append(path)
        if "phi_v" in diag:
            path = out_dir / f"{sid:05d}_phi_v.pgm"
            write_pgm(path, diag["phi_v"][0, :, 0].reshape(side, side))
            written.append(path)
        for key, tag in (("gate_e", "gate_es"), ("gate_i", "gate_is")):
            if key in diag:
                path = out_dir / f"{sid:05d}_{tag}.pgm"
                write_pgm(path, diag[key][0, :, 0].reshape(side, side))
                written.append(path)
    return written
