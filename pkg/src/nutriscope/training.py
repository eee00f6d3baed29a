"""Experiment driver: optimizer, schedule, training loop, eval, checkpoints.

One trainer process, single-worker data delivery, fixed-seed determinism:
identical configuration and seed reproduce identical parameters bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import config_from_dict
from .depth import make_provider
from .errors import CheckpointMismatchError, DataError, NumericError
from .fusion import alignment_loss
from .imageops import bilinear_resize
from .losses import (N_TASKS, TASKS, PmaeReport, TaskWeights, nutrition_loss,
                     task_difficulty, total_loss)
from .model import NutritionModel
from .synth import generate_dataset, load_manifest
from .tensor_io import read_ppm, read_tensor, write_tensor

CHECKPOINT_VERSION = 1


def cosine_lr(epoch, total_epochs, peak):
    """Cosine annealing from the peak at epoch 0 down to zero at the last epoch."""
    if total_epochs <= 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class Adam:
    """Adam with additive weight decay on the gradient."""

    def __init__(self, named_params, lr, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moment1 = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.moment2 = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.moment1[name]
            v = self.moment2[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)


# -- corpus access ---------------------------------------------------------


class Corpus:
    def __init__(self, root):
        self.root = Path(root)
        self.records = load_manifest(root)

    def split(self, name):
        records = [r for r in self.records if r.split == name]
        if not records:
            raise DataError(f"split '{name}' is empty in {self.root}")
        return records

    def load_batch(self, records, dtype):
        rgb, depth, labels, seeds = [], [], [], []
        for rec in records:
            try:
                rgb.append(read_tensor(self.root / rec.rgb_path))
                depth.append(read_tensor(self.root / rec.depth_path))
            except DataError as exc:
                raise DataError(f"sample {rec.sample_id}: {exc}") from exc
            labels.append(rec.label)
            seeds.append(rec.seed)
        return {
            "rgb": np.stack(rgb).astype(dtype),
            "depth": np.stack(depth).astype(np.float64),
            "labels": np.stack(labels),
            "seeds": np.asarray(seeds, dtype=np.int64),
        }

    def labels_for(self, records):
        return np.stack([r.label for r in records])


def ensure_corpus(cfg):
    root = Path(cfg.data.root)
    if not (root / "manifest.jsonl").exists():
        if not cfg.data.generate:
            raise DataError(f"no corpus at {root} and data.generate is off")
        d = cfg.data
        generate_dataset(
            root, samples=d.samples, canvas=d.canvas, items_min=d.items_min,
            items_max=d.items_max, split_train=d.split_train,
            split_test=d.split_test, master_seed=d.master_seed,
            pool_size=d.pool_size, baseline_distance=d.baseline_distance,
            previews=d.previews,
        )
    return Corpus(root)


def _batches(records, batch_size, order=None):
    idx = order if order is not None else range(len(records))
    chunk = []
    for i in idx:
        chunk.append(records[i])
        if len(chunk) == batch_size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


# -- model construction ----------------------------------------------------


def build_model(cfg):
    rng = np.random.Generator(np.random.PCG64(cfg.train.seed))
    dtype = np.float32 if cfg.model.dtype == "float32" else np.float64
    return NutritionModel(
        cfg.model.widths, rng, dtype=dtype,
        unify_width=cfg.model.unify_width, unify_grid=cfg.model.unify_grid,
        attn_dim=cfg.model.attn_dim, use_fusion=cfg.model.use_fusion,
        use_adapter=cfg.model.use_adapter,
        use_masked_head=cfg.model.use_masked_head,
        lowpass_cutoffs=cfg.stage_cutoffs(),
        mask_reduction=cfg.model.mask_reduction,
    )


def build_provider(cfg):
    dp = cfg.depth
    if dp.provider == "file":
        return make_provider("file", max_depth=dp.max_depth)
    return make_provider(
        "corrupt", scale=dp.corrupt_scale, shift=dp.corrupt_shift,
        distortion_amp=dp.distortion_amp, noise_sd=dp.noise_sd,
        max_depth=dp.max_depth,
    )


def forward_batch(model, provider, batch, *, hard_mask=False, keep=None):
    depth_mono = None
    if model.depth_active:
        depth_mono = provider.infer(
            batch["rgb"], context={"depth": batch["depth"], "seeds": batch["seeds"]}
        ).astype(model.dtype)
    return model.forward(batch["rgb"], depth_mono, hard_mask=hard_mask, keep=keep)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(directory, model, cfg, epoch, task_weights, adam=None):
    directory = Path(directory)
    for sub in ("params", "buffers", "adam_m", "adam_v"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "architecture_fingerprint": cfg.architecture_fingerprint(),
        "config": cfg.to_dict(),
        "task_weights": task_weights.as_dict(),
        "params": {n: list(p.data.shape) for n, p in params.items()},
        "buffers": {n: list(b.data.shape) for n, b in buffers.items()},
        "adam_step": adam.t if adam is not None else 0,
    }
    for name, p in params.items():
        write_tensor(directory / "params" / f"{name}.ntsr", p.data)
    for name, b in buffers.items():
        write_tensor(directory / "buffers" / f"{name}.ntsr", b.data)
    if adam is not None:
        for name in adam.moment1:
            write_tensor(directory / "adam_m" / f"{name}.ntsr", adam.moment1[name])
            write_tensor(directory / "adam_v" / f"{name}.ntsr", adam.moment2[name])
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


@dataclass
class Checkpoint:
    directory: Path
    manifest: dict

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        path = directory / "manifest.json"
        if not path.exists():
            raise DataError(f"no checkpoint manifest at {path}")
        manifest = json.loads(path.read_text())
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(
                f"unsupported checkpoint version {manifest.get('format_version')}"
            )
        return cls(directory, manifest)

    def config(self):
        return config_from_dict(self.manifest["config"])

    def task_weights(self):
        return TaskWeights.from_dict(self.manifest["task_weights"])

    def restore_into(self, model):
        for group, names in (("params", self.manifest["params"]),
                             ("buffers", self.manifest["buffers"])):
            for name in names:
                array = read_tensor(self.directory / group / f"{name}.ntsr")
                model.load_array(name, array)

    def check_architecture(self, cfg, model):
        if self.manifest["architecture_fingerprint"] == cfg.architecture_fingerprint():
            return
        ours = {n: list(p.data.shape) for n, p in model.named_parameters()}
        theirs = self.manifest["params"]
        diffs = []
        for name in sorted(set(ours) | set(theirs)):
            a, b = ours.get(name), theirs.get(name)
            if a != b:
                diffs.append(f"{name}: model {a} vs checkpoint {b}")
        raise CheckpointMismatchError(
            "architecture fingerprint mismatch; differing parameters:\n  "
            + "\n  ".join(diffs or ["(same shapes, different architecture options)"])
        )


def build_from_checkpoint(directory):
    ckpt = Checkpoint.load(directory)
    cfg = ckpt.config()
    model = build_model(cfg)
    ckpt.restore_into(model)
    return ckpt, cfg, model


# -- evaluation --------------------------------------------------------------


def report_from_predictions(targets, preds, label=""):
    """Dataset-level PMAE per task: total absolute error over total target."""
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    denom = targets.sum(axis=0)
    if np.any(denom <= 0):
        raise DataError("evaluation split has a degenerate (nonpositive) target sum")
    per_task = np.abs(targets - preds).sum(axis=0) / denom
    return PmaeReport(per_task, targets.shape[0], label=label)


def evaluate_records(model, provider, corpus, records, batch_size, cfg, label=""):
    preds, targets = [], []
    hard = cfg.model.hard_mask and cfg.model.use_masked_head
    keep = cfg.hard_keep_count() if hard else None
    for chunk in _batches(records, batch_size):
        batch = corpus.load_batch(chunk, model.dtype)
        out = forward_batch(model, provider, batch, hard_mask=hard, keep=keep)
        preds.append(out["pred"].data.copy())
        targets.append(batch["labels"])
    return report_from_predictions(np.concatenate(targets), np.concatenate(preds), label)


def evaluate(checkpoint_dir, split="test", data_root=None, label=None):
    ckpt, cfg, model = build_from_checkpoint(checkpoint_dir)
    if data_root is not None:
        cfg = cfg.copy({("data", "root"): str(data_root)})
    corpus = Corpus(cfg.data.root)
    provider = build_provider(cfg)
    records = corpus.split(split)
    return evaluate_records(
        model, provider, corpus, records, cfg.train.batch_size, cfg,
        label=label if label is not None else split,
    )


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_dir: Path
    best_dir: Path
    log: list


def _carve_validation(records, fraction, seed):
    if fraction <= 0 or len(records) < 2:
        return records, []
    rng = np.random.Generator(np.random.PCG64(seed + 0x5EED))
    order = rng.permutation(len(records))
    n_val = max(1, int(round(fraction * len(records))))
    val_idx = set(order[:n_val].tolist())
    main = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return main, val


def _depth_aux_loss(out, batch, model):
    gt = T.constant(batch["depth"].astype(model.dtype))
    diff = T.sub(out["adapted_depth"], gt)
    return T.tmean(T.mul(diff, diff))


def _alignable(out):
    """Skip the alignment term when a pooled feature vector died to zero."""
    for key in ("feats_rgb", "feats_depth"):
        norms = np.linalg.norm(out[key].data, axis=-1)
        if np.any(norms < 1e-12):
            return False
    return True


def _run_training(cfg, model, corpus, provider, task_weights, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_records = corpus.split("train")
    main, val = _carve_validation(train_records, cfg.train.val_fraction,
                                  cfg.train.seed)
    adam = Adam(list(model.named_parameters()), lr=cfg.train.learning_rate,
                weight_decay=cfg.train.weight_decay)
    log = []
    best_mean = math.inf
    best_dir = out_dir / "checkpoint-best"
    last_dir = out_dir / "checkpoint-last"
    use_align = model.use_fusion and cfg.train.align_weight > 0
    for epoch in range(cfg.train.epochs):
        adam.lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.learning_rate)
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.train.seed, epoch]))
        )
        order = rng.permutation(len(main))
        abs_err = np.zeros(N_TASKS)
        target_sum = np.zeros(N_TASKS)
        loss_sum, batch_count = 0.0, 0
        for chunk in _batches(main, cfg.train.batch_size, order):
            batch = corpus.load_batch(chunk, model.dtype)
            try:
                out = forward_batch(model, provider, batch)
                loss = nutrition_loss(out["pred"], batch["labels"],
                                      task_weights.values)
                if use_align and batch["labels"].shape[0] > 1 and _alignable(out):
                    loss = total_loss(
                        loss,
                        alignment_loss(out["feats_rgb"], out["feats_depth"],
                                       cfg.fusion.temperature),
                        cfg.train.align_weight,
                    )
                if cfg.depth.aux_weight > 0 and model.use_adapter:
                    loss = T.add(loss, T.scale_shift(
                        _depth_aux_loss(out, batch, model),
                        cfg.depth.aux_weight, 0.0,
                    ))
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericError(f"non-finite loss {loss_value}")
            except NumericError as exc:
                save_checkpoint(last_dir, model, cfg, epoch, task_weights, adam)
                raise NumericError(
                    f"numeric failure at epoch {epoch}: {exc}; "
                    f"last good parameters saved to {last_dir}"
                ) from exc
            adam.zero_grad()
            loss.backward()
            adam.step()
            loss_sum += loss_value
            batch_count += 1
            abs_err += np.abs(out["pred"].data - batch["labels"]).sum(axis=0)
            target_sum += batch["labels"].sum(axis=0)
        epoch_pmae = abs_err / np.maximum(target_sum, 1e-12)
        task_weights.update([task_difficulty(p) for p in epoch_pmae])
        entry = {
            "epoch": epoch,
            "lr": adam.lr,
            "train_loss": loss_sum / max(batch_count, 1),
            "train_pmae": {t: float(p) for t, p in zip(TASKS, epoch_pmae)},
            "task_weights": [float(w) for w in task_weights.values],
        }
        if val:
            report = evaluate_records(model, provider, corpus, val,
                                      cfg.train.batch_size, cfg, label="val")
            entry["val_pmae_mean"] = report.mean
            if report.mean < best_mean:
                best_mean = report.mean
                save_checkpoint(best_dir, model, cfg, epoch, task_weights, adam)
        log.append(entry)
        if cfg.train.checkpoint_every and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint-{epoch + 1:04d}", model, cfg,
                            epoch + 1, task_weights, adam)
    save_checkpoint(last_dir, model, cfg, cfg.train.epochs, task_weights, adam)
    if not best_dir.exists():
        save_checkpoint(best_dir, model, cfg, cfg.train.epochs, task_weights, adam)
    (out_dir / "train_log.jsonl").write_text(
        "".join(json.dumps(e, sort_keys=True) + "\n" for e in log)
    )
    return TrainResult(last_dir, best_dir, log)


def train(cfg):
    """Train from scratch per the configuration; returns checkpoint paths and log."""
    corpus = ensure_corpus(cfg)
    model = build_model(cfg)
    provider = build_provider(cfg)
    scale = corpus.labels_for(corpus.split("train")).mean(axis=0)
    model.set_target_scale(scale)
    task_weights = TaskWeights(cfg.train.smoothing)
    return _run_training(cfg, model, corpus, provider, task_weights,
                         cfg.train.out_dir)


def finetune(checkpoint_dir, cfg):
    """Continue training a checkpoint on another dataset.

    Optimizer state and task weights start fresh; model parameters and the
    output scale come from the checkpoint unchanged.
    """
    ckpt = Checkpoint.load(checkpoint_dir)
    model = build_model(cfg)
    ckpt.check_architecture(cfg, model)
    ckpt.restore_into(model)
    corpus = ensure_corpus(cfg)
    provider = build_provider(cfg)
    task_weights = TaskWeights(cfg.train.smoothing)
    return _run_training(cfg, model, corpus, provider, task_weights,
                         cfg.train.out_dir)


# -- prediction ---------------------------------------------------------------


def _load_image(path):
    path = Path(path)
    if path.suffix == ".ntsr":
        image = read_tensor(path)
    elif path.suffix in (".ppm", ".pnm"):
        image = read_ppm(path)
    else:
        raise DataError(f"unsupported image format '{path.suffix}' (use .ntsr or .ppm)")
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"{path}: expected a (3, H, W) image, got {image.shape}")
    return np.asarray(image, dtype=np.float64)


def predict(checkpoint_dir, image_path, depth_path=None):
    """Predict the five nutrition quantities for a single image."""
    ckpt, cfg, model = build_from_checkpoint(checkpoint_dir)
    image = _load_image(image_path)
    size = cfg.data.canvas
    image = bilinear_resize(image, size, size)
    batch = {
        "rgb": image[None].astype(model.dtype),
        "depth": None,
        "seeds": np.zeros(1, dtype=np.int64),
    }
    if model.depth_active:
        if depth_path is None:
            raise DataError(
                "this model consumes depth; pass the per-image depth tensor file"
            )
        depth = read_tensor(depth_path)
        if depth.ndim == 2:
            depth = depth[None]
        batch["depth"] = bilinear_resize(depth, size, size)[None]
    provider = build_provider(cfg)
    out = forward_batch(
        model, provider, batch,
        hard_mask=cfg.model.hard_mask and cfg.model.use_masked_head,
        keep=cfg.hard_keep_count() if cfg.model.hard_mask else None,
    )
    values = out["pred"].data[0]
    units = {"calories": "kcal", "mass": "g", "fat": "g",
             "carbohydrate": "g", "protein": "g"}
    return {
        "image": str(image_path),
        "prediction": {t: float(v) for t, v in zip(TASKS, values)},
        "units": units,
        "config_fingerprint": ckpt.manifest["architecture_fingerprint"],
        "checkpoint_epoch": ckpt.manifest["epoch"],
    }


# -- ablation -----------------------------------------------------------------

ABLATION_ROWS = ("baseline", "fusion", "fusion-adapter", "full")


def ablate(cfg):
    """Train and evaluate the four cumulative module configurations."""
    out_root = Path(cfg.train.out_dir)
    reports = []
    for preset in ABLATION_ROWS:
        run_cfg = cfg.copy({
            ("train", "preset"): preset,
            ("train", "out_dir"): str(out_root / preset),
        })
        result = train(run_cfg)
        report = evaluate(result.best_dir, split="test", label=preset)
        reports.append(report)
    table = [PmaeReport.table_header()] + [r.table_row() for r in reports]
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "ablation.txt").write_text("\n".join(table) + "\n")
    (out_root / "ablation.jsonl").write_text(
        "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in reports)
    )
    return reports


def export_sample_tensor(path, array):
    """Convenience passthrough for writing model-ready tensors."""
    write_tensor(path, array)
