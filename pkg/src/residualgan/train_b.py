"""Stage B: segmentation on translated tiles with output-space adaptation.

Each iteration first updates the output discriminator (segmenter frozen),
then the segmenter on ``lambda_seg * CE + lambda_adv_o * adv`` (output
discriminator frozen). Validation mIoU drives a plateau learning-rate
schedule and best-snapshot selection.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .datakit import TileManifest, TileStore, ValidationError, decode_labels, save_image
from .losses import LossBundle, StageBWeights, osa_disc_loss, seg_adv_loss, seg_ce_loss
from .metrics import ConfusionMatrix, MetricsReport, compute_report, confusion
from .nets import OutputSpaceDiscriminator, Segmenter
from .runlog import MetricsLog
from .train_a import TrainingDiverged, deterministic_mode, frozen

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageBConfig:
    weights: StageBWeights = field(default_factory=StageBWeights)
    lr: float = 2e-4
    lr_disc: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-6
    batch_size: int = 16
    epochs: int = 50
    num_classes: int = 6
    encoder_scale: str = "paper"
    encoder_width: int = 16
    disc_width: int = 64
    adv_variant: str = "printed"
    ignore_index: int | None = None
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.adv_variant not in ("printed", "nonsaturating"):
            raise ValueError("adv_variant must be 'printed' or 'nonsaturating'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageBConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = StageBWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class StageBCheckpoint:
    config: StageBConfig
    segmenter: Segmenter
    disc: OutputSpaceDiscriminator
    opt_seg: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau
    class_names: list[str] = field(default_factory=list)
    epoch: int = 0
    steps: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    best_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    sampler: torch.Generator = field(default_factory=torch.Generator)

    @classmethod
    def fresh(cls, cfg: StageBConfig, class_names: list[str] | None = None) -> "StageBCheckpoint":
        torch.manual_seed(cfg.seed)
        seg = Segmenter(cfg.num_classes, cfg.encoder_scale, width=cfg.encoder_width)
        disc = OutputSpaceDiscriminator(cfg.num_classes, cfg.disc_width)
        opt_seg = torch.optim.Adam(seg.parameters(), lr=cfg.lr, betas=cfg.betas)
        opt_disc = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=cfg.betas)
        sched = make_plateau_scheduler(opt_seg, cfg)
        names = list(class_names or [f"class_{i}" for i in range(cfg.num_classes)])
        sampler = torch.Generator().manual_seed(cfg.seed + 1)
        return cls(cfg, seg, disc, opt_seg, opt_disc, sched, names, sampler=sampler)

    def best_segmenter(self) -> Segmenter:
        """Segmenter carrying the best-validation weights (current weights if none)."""
        if self.best_state is None:
            return self.segmenter
        seg = copy.deepcopy(self.segmenter)
        seg.load_state_dict(self.best_state)
        return seg

    def save(self, path) -> Path:
        payload = {
            "config": self.config.to_dict(),
            "class_names": self.class_names,
            "state": {
                "segmenter": self.segmenter.state_dict(),
                "disc": self.disc.state_dict(),
                "opt_seg": self.opt_seg.state_dict(),
                "opt_disc": self.opt_disc.state_dict(),
                "scheduler": self.scheduler.state_dict(),
            },
            "best": {"metric": self.best_metric, "epoch": self.best_epoch, "state": self.best_state},
            "epoch": self.epoch,
            "steps": self.steps,
            "history": self.history,
            "rng": {"torch": torch.get_rng_state(), "sampler": self.sampler.get_state()},
        }
        return ckpt_io.save_payload(path, "stage_b", payload)

    @classmethod
    def load(cls, path, restore_rng: bool = False) -> "StageBCheckpoint":
        p = ckpt_io.load_payload(path, "stage_b")
        try:
            ck = cls.fresh(StageBConfig.from_dict(p["config"]), p["class_names"])
            st = p["state"]
            ck.segmenter.load_state_dict(st["segmenter"])
            ck.disc.load_state_dict(st["disc"])
            ck.opt_seg.load_state_dict(st["opt_seg"])
            ck.opt_disc.load_state_dict(st["opt_disc"])
            ck.scheduler.load_state_dict(st["scheduler"])
            ck.best_metric = p["best"]["metric"]
            ck.best_epoch = p["best"]["epoch"]
            ck.best_state = p["best"]["state"]
            ck.epoch, ck.steps = p["epoch"], p["steps"]
            ck.history = list(p["history"])
            ck.sampler.set_state(p["rng"]["sampler"])
            if restore_rng:
                torch.set_rng_state(p["rng"]["torch"])
        except (KeyError, RuntimeError, TypeError, ValueError) as exc:
            raise ckpt_io.CheckpointError(f"{path}: incompatible stage_b payload ({exc})") from exc
        return ck


def make_plateau_scheduler(opt: torch.optim.Optimizer, cfg: StageBConfig):
    """Multiply the learning rate by ``plateau_factor`` once the metric stops rising."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="max", factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr
    )


def latest_checkpoint(out_dir) -> Path | None:
    found = []
    for p in (Path(out_dir) / "stage_b").glob("epoch_*.ckpt"):
        m = re.fullmatch(r"epoch_(\d+)\.ckpt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


@torch.no_grad()
def evaluate(seg: Segmenter, manifest: TileManifest, class_names: list[str], batch_size: int = 8,
             strict: bool = False) -> tuple[MetricsReport, ConfusionMatrix]:
    store = TileStore(manifest, with_labels=True)
    cm = ConfusionMatrix.zeros(seg.num_classes)
    was_training = seg.training
    seg.eval()
    for start in range(0, len(store), batch_size):
        x, y = store.batch(range(start, min(start + batch_size, len(store))))
        pred = seg(x).argmax(dim=1)
        cm = cm + confusion(y.numpy(), pred.numpy(), seg.num_classes)
    seg.train(was_training)
    return compute_report(cm, class_names, strict=strict), cm


def _disc_step(ck: StageBCheckpoint, x_s, x_t) -> float:
    """Output discriminator update on softmax maps; the segmenter is not updated."""
    with torch.no_grad():
        p_s = F.softmax(ck.segmenter(x_s), dim=1)
        p_t = F.softmax(ck.segmenter(x_t), dim=1)
    loss = osa_disc_loss(ck.disc(p_s), ck.disc(p_t), from_logits=True)
    ck.opt_disc.zero_grad(set_to_none=True)
    loss.backward()
    ck.opt_disc.step()
    ck.opt_disc.zero_grad(set_to_none=True)
    return loss.item()


def _seg_step(ck: StageBCheckpoint, x_s, y_s, x_t=None) -> dict[str, float]:
    """Segmenter update; ``x_t`` adds the output-space adversarial term."""
    cfg, w = ck.config, ck.config.weights
    with frozen(ck.disc):
        terms = {"seg": seg_ce_loss(ck.segmenter(x_s), y_s, cfg.ignore_index)}
        weights = {"seg": w.lambda_seg}
        if x_t is not None:
            p_t = F.softmax(ck.segmenter(x_t), dim=1)
            terms["adv_o"] = seg_adv_loss(ck.disc(p_t), from_logits=True, variant=cfg.adv_variant)
            weights["adv_o"] = w.lambda_adv_o
        bundle = LossBundle(terms, weights)
        ck.opt_seg.zero_grad(set_to_none=True)
        bundle.total.backward()
        ck.opt_seg.step()
        ck.opt_seg.zero_grad(set_to_none=True)
    return bundle.scalars()


def train_stage_b(
    cfg: StageBConfig,
    translated: TileManifest,
    target: TileManifest | None,
    val: TileManifest | None,
    out_dir=None,
    resume: bool = False,
    metrics_log: MetricsLog | None = None,
) -> StageBCheckpoint:
    """Train the segmenter on labeled translated tiles, adapting to unlabeled target tiles.

    With ``lambda_adv_o == 0`` or an empty target manifest the output
    discriminator is never touched and training is purely supervised.
    """
    if not len(translated):
        raise ValidationError("stage B needs labeled translated tiles")
    if not translated.annotated:
        raise ValidationError("translated manifest has no labels")
    if translated.domain.palette.num_classes != cfg.num_classes:
        raise ValidationError(
            f"labels have {translated.domain.palette.num_classes} classes, config expects {cfg.num_classes}"
        )
    use_osa = cfg.weights.lambda_adv_o > 0
    if use_osa and (target is None or not len(target)):
        warnings.warn("no unlabeled target tiles: output-space adaptation disabled", stacklevel=2)
        use_osa = False
    out_dir = Path(out_dir) if out_dir is not None else None
    if metrics_log is None:
        metrics_log = MetricsLog(out_dir / "stage_b_losses.jsonl" if out_dir else None, "stage_b")

    ck = None
    if resume and out_dir is not None:
        last = latest_checkpoint(out_dir)
        if last is not None:
            ck = StageBCheckpoint.load(last, restore_rng=True)
            log.info("resuming stage B from %s (epoch %d)", last, ck.epoch)
    if ck is None:
        ck = StageBCheckpoint.fresh(cfg, translated.domain.palette.names)

    lab_store = TileStore(translated, with_labels=True)
    tgt_store = TileStore(target) if use_osa else None
    n = len(lab_store)

    with deterministic_mode(cfg.deterministic):
        for epoch in range(ck.epoch + 1, cfg.epochs + 1):
            ck.segmenter.train()
            ck.disc.train()
            order = torch.randperm(n, generator=ck.sampler)
            sums: dict[str, list[float]] = {}
            for start in range(0, n, cfg.batch_size):
                x_s, y_s = lab_store.batch(order[start : start + cfg.batch_size].tolist())
                vals: dict[str, float] = {}
                x_t = None
                if use_osa:
                    t_idx = torch.randint(0, len(tgt_store), (x_s.shape[0],), generator=ck.sampler)
                    x_t = tgt_store.batch(t_idx.tolist())
                    vals["d_out"] = _disc_step(ck, x_s, x_t)
                vals.update(_seg_step(ck, x_s, y_s, x_t))
                ck.steps += 1
                if not all(math.isfinite(v) for v in vals.values()):
                    ck.epoch = epoch - 1
                    if out_dir is not None:
                        ck.save(out_dir / "stage_b" / "abort.ckpt")
                    raise TrainingDiverged(f"non-finite stage B loss at step {ck.steps}: {vals}")
                metrics_log.log(ck.steps, vals)
                for k, v in vals.items():
                    sums.setdefault(k, []).append(v)

            ck.epoch = epoch
            summary = {k: float(np.mean(v)) for k, v in sums.items()}
            summary["epoch"] = epoch
            summary["lr"] = ck.opt_seg.param_groups[0]["lr"]
            if val is not None and len(val):
                report, _ = evaluate(ck.segmenter, val, ck.class_names)
                summary["val_miou"] = report.miou
                summary["val_f1"] = report.overall_f1
                metrics_log.log(ck.steps, {"val_miou": report.miou, "val_f1": report.overall_f1})
                ck.scheduler.step(report.miou)
                if report.miou > ck.best_metric:
                    ck.best_metric, ck.best_epoch = report.miou, epoch
                    ck.best_state = copy.deepcopy(ck.segmenter.state_dict())
            ck.history.append(summary)
            log.info("stage B epoch %d: %s", epoch, {k: round(v, 4) for k, v in summary.items()})
            if out_dir is not None:
                ck.save(out_dir / "stage_b" / f"epoch_{epoch:03d}.ckpt")
    if ck.best_state is None:
        ck.best_state = copy.deepcopy(ck.segmenter.state_dict())
        ck.best_epoch = ck.epoch
    if out_dir is not None:
        ck.save(out_dir / "stage_b" / "final.ckpt")
    return ck


@torch.no_grad()
def predict(ck: StageBCheckpoint | Segmenter, tiles: TileManifest, batch_size: int = 1,
            out_dir=None) -> list[np.ndarray]:
    """Argmax class maps per tile, from the best snapshot of a checkpoint.

    With ``out_dir`` each map is also written as a palette-colored PNG
    next to a ``palette.txt`` sidecar.
    """
    seg = ck.best_segmenter() if isinstance(ck, StageBCheckpoint) else ck
    seg.eval()
    store = TileStore(tiles)
    preds: list[np.ndarray] = []
    for start in range(0, len(store), batch_size):
        x = store.batch(range(start, min(start + batch_size, len(store))))
        if x.shape[1] != 3:
            raise ValidationError(f"expected 3-channel tiles, got {x.shape[1]}")
        preds.extend(p.numpy().astype(np.uint8) for p in seg(x).argmax(dim=1))
    if out_dir is not None:
        out_dir = Path(out_dir)
        palette = tiles.domain.palette
        out_dir.mkdir(parents=True, exist_ok=True)
        palette.dump(out_dir / "palette.txt")
        for rec, p in zip(tiles.tiles, preds):
            save_image(out_dir / f"{Path(rec.image_path).stem}.png", decode_labels(p, palette))
    return preds
