"""Training, evaluation, inference and ablation runs."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from .complexity import count_model
from .config import TrainConfig
from .data import CORPUS_DIR, Dataset, batch_indices, load_dataset, resize_rgb, write_mask
from .degrade import read_rgb, write_rgb
from .losses import LocosSchedule, mse_loss, total_loss
from .metrics import MetricReport, MetricRow, psnr, seg_metrics, ssim
from .model import VARIANTS, EndoCaver, ModelConfig
from .optim import Adam, lr_at
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "lr", "total", "deb", "seg", "w_seg")
CHECKPOINT_NAME = "checkpoint.ckpt"
EVAL_BATCH = 8


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; the last good checkpoint is kept on disk."""


@dataclass
class StepLog:
    step: int
    lr: float
    total: float
    deb: float
    seg: float
    w_seg: float

    def row(self) -> list[str]:
        return [str(self.step), *(repr(float(getattr(self, c))) for c in LOSS_COLUMNS[1:])]


@dataclass
class TrainResult:
    model: EndoCaver
    history: list[StepLog]
    checkpoint: Path | None
    stopped_early: bool = False
    evals: list[tuple[int, MetricRow]] = field(default_factory=list)


Callback = Callable[[int, EndoCaver, list[StepLog]], bool]


def _dataset_for(cfg: TrainConfig, root: str | None, degraded: bool | None = None) -> Dataset:
    ds = load_dataset(root or CORPUS_DIR, cfg.input_size, cfg.degraded if degraded is None else degraded,
                      cfg.seed, cfg.severity)
    return ds.subset(cfg.max_images) if cfg.max_images else ds


def _schedule(cfg: TrainConfig, locos_on: bool) -> LocosSchedule | None:
    if not (cfg.locos.enabled and locos_on):
        return None
    joint = cfg.total_steps - cfg.deblur_warmup_steps
    return LocosSchedule(cfg.locos.w_min, joint, cfg.locos.direction)


def _save(path: Path, model, opt, step: int, cfg: TrainConfig) -> Path:
    return ckpt_io.save(path, model, opt, step, cfg.to_dict(), rng={"seed": cfg.seed, "next_step": step})


def train(model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None, callback: Callback | None = None,
          resume=None, dataset: Dataset | None = None, locos_on: bool = True) -> TrainResult:
    """Run the optimisation recipe: Adam, linear warmup then cosine decay to 0 at ``total_steps``.

    Batches are seeded per-epoch permutations of the dataset. ``callback`` runs
    after every step and may return True to stop early. ``resume`` continues a
    saved run; its loss trajectory matches an unbroken run exactly.
    """
    cfg.validate()
    ds = dataset if dataset is not None else _dataset_for(cfg, cfg.train_dir)
    if ds.masks is None:
        raise ValueError("training needs masks/ alongside images/")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start = 0
    if resume is not None:
        saved = ckpt_io.load(resume)
        model = saved.build_model()
        opt = ckpt_io.restore_optimizer(saved, model)
        start = saved.step
        log.info("resuming from %s at step %d", resume, start)
    else:
        model = EndoCaver(model_cfg)
        opt = Adam(model.parameters(), cfg.lr)
    model.train()
    sched = _schedule(cfg, locos_on)

    history: list[StepLog] = []
    loss_fh = None
    if out is not None:
        loss_path = out / "loss.csv"
        fresh = resume is None or not loss_path.exists()
        loss_fh = open(loss_path, "w" if fresh else "a", newline="")
        writer = csv.writer(loss_fh)
        if fresh:
            writer.writerow(LOSS_COLUMNS)
    ckpt_path = out / CHECKPOINT_NAME if out is not None else None
    result = TrainResult(model, history, ckpt_path)
    try:
        for step in range(start, cfg.total_steps):
            idx = batch_indices(len(ds), cfg.batch_size, cfg.seed, step)
            lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.total_steps)
            buffers = {n: b.copy() for n, b in model.named_buffers()}
            outputs = model(Tensor(ds.degraded[idx]))
            if step < cfg.deblur_warmup_steps and outputs.restored is not None:
                report = total_loss(outputs, ds.clean[idx], ds.masks[idx], 0, None)
                report.total = mse_loss(outputs.restored, ds.clean[idx])
                report.weight = 0.0
            else:
                report = total_loss(outputs, ds.clean[idx], ds.masks[idx], step - cfg.deblur_warmup_steps, sched)
            loss = report.total.item()
            if not math.isfinite(loss):
                # parameters are untouched; undo the running-stat update of this forward
                model.load_state_dict({**{n: p.data for n, p in model.named_parameters()}, **buffers})
                if ckpt_path is not None:
                    _save(ckpt_path, model, opt, step, cfg)
                raise TrainingDiverged(f"non-finite loss at step {step}; last good state kept in {ckpt_path}")
            opt.zero_grad()
            report.total.backward()
            opt.step(lr)
            entry = StepLog(step, lr, loss, report.deb, report.seg, report.weight)
            history.append(entry)
            if loss_fh is not None:
                writer.writerow(entry.row())
            done = step + 1
            if ckpt_path is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                _save(ckpt_path, model, opt, done, cfg)
            stop = False
            if cfg.eval_every and done % cfg.eval_every == 0:
                row = evaluate_model(model, ds).mean()
                result.evals.append((done, row))
                log.info("step %d: dice %.4f psnr %s", done, row.dice or 0.0, row.psnr)
                stop = _targets_met(row, cfg)
            if callback is not None and callback(done, model, history):
                stop = True
            if stop:
                result.stopped_early = done < cfg.total_steps
                break
    finally:
        if loss_fh is not None:
            loss_fh.close()
    if ckpt_path is not None:
        _save(ckpt_path, model, opt, start + len(history), cfg)
    return result


def _targets_met(row: MetricRow, cfg: TrainConfig) -> bool:
    if cfg.stop_dice is None and cfg.stop_psnr is None:
        return False
    ok_dice = cfg.stop_dice is None or (row.dice is not None and row.dice >= cfg.stop_dice)
    ok_psnr = cfg.stop_psnr is None or (row.psnr is not None and row.psnr >= cfg.stop_psnr)
    return ok_dice and ok_psnr


# -- evaluation -------------------------------------------------------------------------
def predict(model: EndoCaver, images: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
    """Inference-mode forward in fixed-size chunks; restores the training flag afterwards."""
    was = model.training
    model.eval()
    restored, masks = [], []
    try:
        with no_grad():
            for i in range(0, len(images), EVAL_BATCH):
                o = model(Tensor(images[i:i + EVAL_BATCH]))
                masks.append(o.mask.data)
                if o.restored is not None:
                    restored.append(o.restored.data)
    finally:
        model.train(was)
    return (np.concatenate(restored) if restored else None), np.concatenate(masks)


def evaluate_model(model: EndoCaver, ds: Dataset) -> MetricReport:
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    restored, masks = predict(model, ds.degraded)
    if ds.masks is None:
        log.warning("no masks found: reporting restoration metrics only")
        if restored is None:
            raise ValueError("no masks and no restoration branch: nothing to evaluate")
    report = MetricReport()
    for i, name in enumerate(ds.names):
        row = MetricRow(name)
        if ds.masks is not None:
            row.dice, row.iou, row.recall = seg_metrics(masks[i], ds.masks[i])
        if restored is not None:
            row.psnr = psnr(restored[i], ds.clean[i])
            row.ssim = ssim(restored[i], ds.clean[i])
        report.rows.append(row)
    return report


def _input_size(saved: ckpt_io.Checkpoint, default: int = 64) -> int:
    return int((saved.train_config or {}).get("input_size", default))


def evaluate(checkpoint, dataset_dir=None, degraded: bool = True, out_csv=None, seed: int = 0,
             severity: str = "moderate", input_size: int | None = None) -> MetricReport:
    saved = ckpt_io.load(checkpoint)
    model = saved.build_model()
    ds = load_dataset(dataset_dir or CORPUS_DIR, input_size or _input_size(saved), degraded, seed, severity)
    report = evaluate_model(model, ds)
    if out_csv is not None:
        report.write_csv(Path(out_csv))
    return report


# -- inference --------------------------------------------------------------------------
def infer(checkpoint, image_path, out_dir, input_size: int | None = None) -> dict[str, Path]:
    """Write ``<stem>_mask.png`` (thresholded), ``<stem>_prob.png`` and, with a restoration branch, ``<stem>_restored.png``."""
    saved = ckpt_io.load(checkpoint)
    model = saved.build_model()
    size = input_size or _input_size(saved)
    img = resize_rgb(read_rgb(Path(image_path)), size)
    restored, mask = predict(model, img[None])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    paths = {"mask": out / f"{stem}_mask.png", "prob": out / f"{stem}_prob.png"}
    write_mask(paths["mask"], (mask[0] >= 0.5).astype(np.float32))
    write_mask(paths["prob"], mask[0])
    if restored is not None:
        paths["restored"] = out / f"{stem}_restored.png"
        write_rgb(paths["restored"], restored[0])
    return paths


# -- ablation ---------------------------------------------------------------------------
ABLATION_COLUMNS = ("variant", "dice", "psnr", "params", "gmacs")


@dataclass
class AblationRow:
    variant: str
    dice: float
    psnr: float | None
    params: int
    gmacs: float


def ablate(model_cfg: ModelConfig, cfg: TrainConfig, variants: list[str] | None = None, out_dir=None,
           mac_size: int | None = None) -> list[AblationRow]:
    """Train and evaluate each variant under one seed; report Dice, PSNR, params and GMac."""
    variants = list(variants or VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {sorted(VARIANTS)}")
    train_ds = _dataset_for(cfg, cfg.train_dir)
    eval_ds = _dataset_for(cfg, cfg.eval_dir) if cfg.eval_dir else train_ds
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for name in variants:
        vcfg = model_cfg.variant(name)
        locos_on = VARIANTS[name][3]
        sub = out / name if out is not None else None
        res = train(vcfg, cfg, sub, dataset=train_ds, locos_on=locos_on)
        mean = evaluate_model(res.model, eval_ds).mean()
        counts = count_model(vcfg, mac_size or cfg.input_size)
        rows.append(AblationRow(name, mean.dice, mean.psnr, counts.params, counts.gmacs))
        log.info("variant %s: dice %.4f", name, mean.dice)
    if out is not None:
        write_ablation_csv(rows, out / "ablation.csv")
    return rows


def write_ablation_csv(rows: list[AblationRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.variant, f"{r.dice:.6f}", "" if r.psnr is None else f"{r.psnr:.6f}",
                        r.params, f"{r.gmacs:.6f}"])


def read_loss_csv(path) -> list[StepLog]:
    with open(path, newline="") as fh:
        return [StepLog(int(r["step"]), *(float(r[c]) for c in LOSS_COLUMNS[1:])) for r in csv.DictReader(fh)]
