"""Training loop, evaluation driver and backbone ablation sweep."""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import metrics as M
from .data import AugmentationConfig, iterate_batches, resize_image
from .decoder import predict_mask
from .errors import ConfigError, TrainingDivergedError
from .loss import total_loss
from .model import ModelConfig, build_model, save_checkpoint, with_preset

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "l_wbce", "l_wiou", "total"]
EPOCH_COLUMNS = ["epoch", "lr", "loss"] + M.CSV_COLUMNS[2:]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 4
    eta_min: float = 0.0
    grad_clip: Optional[float] = None
    seed: int = 0
    image_size: int = 352
    # False: anneal once per epoch (total_steps = epochs); True: per optimizer step
    per_step_schedule: bool = False
    max_steps: Optional[int] = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    check_frozen: bool = True
    eval_every: int = 0

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}", field="train.lr")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", field="train.epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="train.batch_size")
        if self.eta_min < 0:
            raise ConfigError("eta_min must be >= 0", field="train.eta_min")
        if self.image_size % 32 or self.image_size <= 0:
            raise ConfigError("image_size must be a positive multiple of 32", field="data.image_size")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1", field="train.max_steps")
        self.augmentation.validate()
        return self


@dataclass
class RunRecord:
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)
    checkpoint: Optional[str] = None

    def losses(self):
        return [r["total"] for r in self.steps]


def cosine_lr(step, total_steps, base_lr, eta_min=0.0):
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return eta_min + 0.5 * (base_lr - eta_min) * (1 + math.cos(math.pi * step / total_steps))


def _frozen_snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}


def _assert_frozen(model, snapshot):
    params = dict(model.named_parameters())
    changed = [n for n, ref in snapshot.items() if not torch.equal(params[n].detach(), ref)]
    if changed:
        raise RuntimeError(f"frozen parameters were modified: {changed[:5]}")


def make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)


def _write_rows(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def train(model, dataset, cfg: TrainConfig, out_dir=None, eval_dataset=None, step_callback=None) -> RunRecord:
    """AdamW on the deep-supervision loss. Writes log.csv, metrics.csv and final.sunet to ``out_dir``.

    ``step_callback(step, row, model)`` runs after every optimizer step; returning True stops training.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty", field="data")
    torch.manual_seed(cfg.seed)
    model.train()
    opt = make_optimizer(model, cfg)
    frozen = _frozen_snapshot(model) if cfg.check_frozen else None
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    record = RunRecord()
    step, stop = 0, False
    for epoch in range(cfg.epochs):
        if not cfg.per_step_schedule:
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min)
        epoch_losses = []
        for images, masks in iterate_batches(
            dataset, cfg.batch_size, cfg.image_size, cfg.augmentation, cfg.seed, epoch
        ):
            if step >= total_steps:
                break
            if cfg.per_step_schedule:
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.eta_min)
            for group in opt.param_groups:
                group["lr"] = lr
            out = model(images)
            br = total_loss(out, masks)
            terms = {"l_wbce": br.l_wbce.item(), "l_wiou": br.l_wiou.item(), "total": br.total.item()}
            if not all(math.isfinite(v) for v in terms.values()):
                raise TrainingDivergedError(step, lr, terms)
            opt.zero_grad(set_to_none=True)
            br.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
            opt.step()
            row = {"step": step, "lr": lr, **terms}
            record.steps.append(row)
            epoch_losses.append(terms["total"])
            step += 1
            if step_callback is not None and step_callback(step - 1, row, model):
                stop = True
                break
        if frozen is not None:
            _assert_frozen(model, frozen)
        erow = {"epoch": epoch, "lr": lr, "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan")}
        if eval_dataset is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rep = evaluate(model, eval_dataset, image_size=cfg.image_size)
            erow.update({k: v for k, v in rep.row().items() if k not in ("dataset", "n")})
            model.train()
        record.epochs.append(erow)
        log.info("epoch %d lr %.3g loss %.4f", epoch, lr, erow["loss"])
        if stop or step >= total_steps:
            break
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "log.csv", LOG_COLUMNS, record.steps)
        _write_rows(out / "metrics.csv", EPOCH_COLUMNS, record.epochs)
        ckpt = save_checkpoint(
            model, out / "final.sunet", training_state={"epoch": epoch, "step": step, "image_size": cfg.image_size, "optimizer": opt}
        )
        record.checkpoint = str(ckpt)
    return record


@torch.no_grad()
def predict_probability(model, image, image_size):
    """Probability map at the image's own resolution, predicted at ``image_size``."""
    model.eval()
    hw = image.shape[-2:]
    x = resize_image(image, (image_size, image_size))
    prob = predict_mask(model(x[None]))
    if tuple(prob.shape[-2:]) != tuple(hw):
        prob = F.interpolate(prob, size=tuple(hw), mode="bilinear", align_corners=False)
    return prob[0, 0].double().numpy()


def evaluate(model, dataset, metric_set=M.ALL_METRICS, image_size=352, name=None) -> M.MetricReport:
    rows = []
    for i in range(len(dataset)):
        sample = dataset[i]
        p = predict_probability(model, sample.image, image_size)
        rows.append(M.compute_metrics(p, sample.mask[0].numpy() > 0.5, metric_set))
    if name is None:
        name = getattr(getattr(dataset, "spec", None), "name", "")
    return M.aggregate(rows, name, metric_set)


def to_uint8(prob):
    return np.clip(np.rint(np.asarray(prob, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def export_predictions(model, dataset, out_dir, image_size=352):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(dataset)):
        sample = dataset[i]
        p = predict_probability(model, sample.image, image_size)
        path = out / f"{sample.stem}.png"
        Image.fromarray(to_uint8(p), "L").save(path)
        paths.append(path)
    return paths


SWEEP_COLUMNS = ("S", "Fadp", "Em", "MAE")
SWEEP_HEADERS = {"S": "S_α", "Fadp": "F_β", "Em": "E_φ", "MAE": "MAE"}


@dataclass
class SweepRow:
    preset: str
    seed: int
    reports: Dict[str, M.MetricReport] = field(default_factory=dict)
    error: Optional[str] = None
    checkpoint: Optional[str] = None


def ablation_sweep(
    presets: Sequence[str],
    dataset,
    train_cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
    eval_datasets=None,
    out_dir=None,
) -> List[SweepRow]:
    """Train and evaluate one model per preset with identical seeds and data order.

    A failing preset yields a row with ``error`` set instead of aborting the sweep.
    """
    if not presets:
        raise ConfigError("ablation sweep needs at least one preset", field="presets")
    model_cfg = model_cfg or ModelConfig()
    eval_datasets = eval_datasets or {getattr(dataset.spec, "name", "train"): dataset}
    rows = []
    for name in presets:
        row = SweepRow(preset=str(name), seed=model_cfg.seed)
        try:
            cfg = with_preset(model_cfg, name)
            model = build_model(cfg)
            run_dir = Path(out_dir) / cfg.preset if out_dir is not None else None
            rec = train(model, dataset, replace(train_cfg), out_dir=run_dir)
            row.checkpoint = rec.checkpoint
            for ds_name, ds in eval_datasets.items():
                row.reports[ds_name] = evaluate(model, ds, image_size=train_cfg.image_size, name=ds_name)
        except Exception as e:  # isolate per-preset failures
            log.exception("preset %s failed", name)
            row.error = f"{type(e).__name__}: {e}"
        rows.append(row)
    return rows


def sweep_markdown(rows: Sequence[SweepRow], extra=("mDice",), show_seed=False) -> str:
    datasets = []
    for r in rows:
        for d in r.reports:
            if d not in datasets:
                datasets.append(d)
    cols = list(SWEEP_COLUMNS) + list(extra)
    header = "| Backbones | " + " | ".join(f"{d} {SWEEP_HEADERS.get(c, c)}" for d in datasets for c in cols) + " |"
    lines = [header, "|" + "---|" * (1 + len(datasets) * len(cols))]
    for r in rows:
        if r.error:
            cells = ["FAILED"] * (len(datasets) * len(cols))
        else:
            cells = []
            for d in datasets:
                vals = r.reports[d].row()
                cells += [vals[c] or "-" for c in cols]
        label = f"{r.preset} (seed {r.seed})" if show_seed else r.preset
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def sweep_csv(rows: Sequence[SweepRow], path):
    fields = ["preset", "seed", "error"] + M.CSV_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            if r.error:
                w.writerow({"preset": r.preset, "seed": r.seed, "error": r.error})
            for rep in r.reports.values():
                w.writerow({"preset": r.preset, "seed": r.seed, "error": "", **rep.row()})
    return path
