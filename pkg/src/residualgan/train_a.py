"""Stage A: unpaired two-way translation with two ResiGenerators and two critics.

Critics take ``critic_iters`` steps per generator step. Each critic step
ascends the Wasserstein terms minus a gradient penalty; each generator
step descends ``lambda_cyc * L_cyc + lambda_adv * (adv_st + adv_ts)``.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .datakit import (
    DomainSpec,
    TileManifest,
    TileRecord,
    TileStore,
    ValidationError,
    center_crop,
    check_scale_compat,
    decode_labels,
    image_to_tensor,
    resize_image_array,
    resize_labels_nearest,
    save_image,
    tensor_to_image,
)
from .losses import (
    LossBundle,
    StageAWeights,
    adv_loss_wgan,
    cycle_loss,
    generator_adv_loss,
    gradient_penalty,
)
from .nets import Discriminator, ResiGenerator, ResiGeneratorConfig
from .runlog import MetricsLog

log = logging.getLogger(__name__)

PLACEMENTS = ("in_network", "pre", "none")


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; an abort checkpoint was written."""


@dataclass(frozen=True)
class StageAConfig:
    k_mode: str = "fixed"
    k_init: float = 1.0
    weights: StageAWeights = field(default_factory=StageAWeights)
    lr_gen: float = 5e-4
    lr_disc: float = 5e-4
    gen_betas: tuple[float, float] = (0.5, 0.999)
    disc_alpha: float = 0.99
    batch_size: int = 1
    critic_iters: int = 5
    epochs: int = 100
    seed: int = 0
    backbone: str = "unet"
    resizer: str = "bilinear"
    residual: bool = True
    resize_placement: str = "in_network"
    gen_depth: int = 7
    gen_width: int = 64
    disc_width: int = 64
    scale_tol: float = 0.05
    deterministic: bool = False

    def __post_init__(self):
        if self.critic_iters < 1:
            raise ValueError("critic_iters must be >= 1")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.resize_placement not in PLACEMENTS:
            raise ValueError(f"resize_placement must be one of {PLACEMENTS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageAConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = StageAWeights(**d["weights"])
        if "gen_betas" in d:
            d["gen_betas"] = tuple(d["gen_betas"])
        return cls(**d)


def generator_configs(cfg: StageAConfig, src: DomainSpec, tgt: DomainSpec) -> tuple[ResiGeneratorConfig, ResiGeneratorConfig]:
    """Generator configs for S->T and T->S under the configured resize placement."""
    common = dict(
        backbone=cfg.backbone, k_mode=cfg.k_mode, k_init=cfg.k_init, residual=cfg.residual,
        depth=cfg.gen_depth, width=cfg.gen_width,
    )
    s, t = src.tile_px, tgt.tile_px
    if cfg.resize_placement == "in_network":
        return (ResiGeneratorConfig(s, t, resizer=cfg.resizer, **common),
                ResiGeneratorConfig(t, s, resizer=cfg.resizer, **common))
    # "pre" resizes, "none" crops source tiles to the target size outside the network.
    return (ResiGeneratorConfig(t, t, resizer="none", **common),
            ResiGeneratorConfig(t, t, resizer="none", **common))


def source_transform(placement: str, tgt_px: int):
    """Array transform applied to source tiles before they enter the generators."""
    if placement == "in_network":
        return None

    def fn(img, lab):
        if placement == "pre":
            img = resize_image_array(img, tgt_px)
            lab = None if lab is None else resize_labels_nearest(lab, tgt_px)
        else:
            img = center_crop(img, tgt_px)
            lab = None if lab is None else center_crop(lab, tgt_px)
        return img, lab

    return fn


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@contextlib.contextmanager
def frozen(*modules: torch.nn.Module):
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


@dataclass
class StageACheckpoint:
    """Full Stage A state: networks, optimizers, counters and loss history."""

    config: StageAConfig
    src_domain: DomainSpec
    tgt_domain: DomainSpec
    gen_st: ResiGenerator
    gen_ts: ResiGenerator
    disc_s: Discriminator
    disc_t: Discriminator
    opt_gen: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    epoch: int = 0
    disc_steps: int = 0
    gen_steps: int = 0
    history: list[dict] = field(default_factory=list)
    sampler: torch.Generator = field(default_factory=torch.Generator)
    gp_sampler: torch.Generator = field(default_factory=torch.Generator)

    @classmethod
    def fresh(cls, cfg: StageAConfig, src: DomainSpec, tgt: DomainSpec) -> "StageACheckpoint":
        torch.manual_seed(cfg.seed)
        st_cfg, ts_cfg = generator_configs(cfg, src, tgt)
        gen_st, gen_ts = ResiGenerator(st_cfg), ResiGenerator(ts_cfg)
        disc_s = Discriminator(src.channels, cfg.disc_width)
        disc_t = Discriminator(tgt.channels, cfg.disc_width)
        opt_gen = torch.optim.Adam(
            list(gen_st.parameters()) + list(gen_ts.parameters()), lr=cfg.lr_gen, betas=cfg.gen_betas
        )
        opt_disc = torch.optim.RMSprop(
            list(disc_s.parameters()) + list(disc_t.parameters()), lr=cfg.lr_disc, alpha=cfg.disc_alpha
        )
        sampler = torch.Generator().manual_seed(cfg.seed + 1)
        gp_sampler = torch.Generator().manual_seed(cfg.seed + 2)
        return cls(cfg, src, tgt, gen_st, gen_ts, disc_s, disc_t, opt_gen, opt_disc,
                   sampler=sampler, gp_sampler=gp_sampler)

    def generator(self, direction: str) -> ResiGenerator:
        if direction == "s2t":
            return self.gen_st
        if direction == "t2s":
            return self.gen_ts
        raise ValueError(f"direction must be 's2t' or 't2s', got {direction!r}")

    def save(self, path) -> Path:
        payload = {
            "config": self.config.to_dict(),
            "src_domain": self.src_domain.to_dict(),
            "tgt_domain": self.tgt_domain.to_dict(),
            "state": {
                "gen_st": self.gen_st.state_dict(),
                "gen_ts": self.gen_ts.state_dict(),
                "disc_s": self.disc_s.state_dict(),
                "disc_t": self.disc_t.state_dict(),
                "opt_gen": self.opt_gen.state_dict(),
                "opt_disc": self.opt_disc.state_dict(),
            },
            "k": {"st": self.gen_st.k.item(), "ts": self.gen_ts.k.item()},
            "epoch": self.epoch,
            "disc_steps": self.disc_steps,
            "gen_steps": self.gen_steps,
            "history": self.history,
            "rng": {
                "torch": torch.get_rng_state(),
                "sampler": self.sampler.get_state(),
                "gp": self.gp_sampler.get_state(),
            },
        }
        return ckpt_io.save_payload(path, "stage_a", payload)

    @classmethod
    def load(cls, path, restore_rng: bool = False) -> "StageACheckpoint":
        p = ckpt_io.load_payload(path, "stage_a")
        try:
            cfg = StageAConfig.from_dict(p["config"])
            ck = cls.fresh(cfg, DomainSpec.from_dict(p["src_domain"]), DomainSpec.from_dict(p["tgt_domain"]))
            st = p["state"]
            ck.gen_st.load_state_dict(st["gen_st"])
            ck.gen_ts.load_state_dict(st["gen_ts"])
            ck.disc_s.load_state_dict(st["disc_s"])
            ck.disc_t.load_state_dict(st["disc_t"])
            ck.opt_gen.load_state_dict(st["opt_gen"])
            ck.opt_disc.load_state_dict(st["opt_disc"])
            ck.epoch, ck.disc_steps, ck.gen_steps = p["epoch"], p["disc_steps"], p["gen_steps"]
            ck.history = list(p["history"])
            ck.sampler.set_state(p["rng"]["sampler"])
            ck.gp_sampler.set_state(p["rng"]["gp"])
            if restore_rng:
                torch.set_rng_state(p["rng"]["torch"])
        except (KeyError, RuntimeError, TypeError, ValueError) as exc:
            raise ckpt_io.CheckpointError(f"{path}: incompatible stage_a payload ({exc})") from exc
        return ck


def save_checkpoint(ck: StageACheckpoint, path) -> Path:
    return ck.save(path)


def load_checkpoint(path) -> StageACheckpoint:
    return StageACheckpoint.load(path)


def latest_checkpoint(out_dir) -> Path | None:
    found = []
    for p in (Path(out_dir) / "stage_a").glob("epoch_*.ckpt"):
        m = re.fullmatch(r"epoch_(\d+)\.ckpt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def _disc_step(ck: StageACheckpoint, x_s, x_t, gp_gen) -> dict[str, float]:
    w = ck.config.weights
    with torch.no_grad():
        fake_t = ck.gen_st(x_s)
        fake_s = ck.gen_ts(x_t)
    adv_st = adv_loss_wgan(ck.disc_t.score(x_t), ck.disc_t.score(fake_t))
    adv_ts = adv_loss_wgan(ck.disc_s.score(x_s), ck.disc_s.score(fake_s))
    gp = gradient_penalty(ck.disc_t.score, x_t, fake_t, w.gp_weight, gp_gen) + gradient_penalty(
        ck.disc_s.score, x_s, fake_s, w.gp_weight, gp_gen
    )
    loss = -w.lambda_adv * (adv_st + adv_ts) + gp
    ck.opt_disc.zero_grad(set_to_none=True)
    loss.backward()
    ck.opt_disc.step()
    ck.opt_disc.zero_grad(set_to_none=True)
    return {"d_adv_st": adv_st.item(), "d_adv_ts": adv_ts.item(), "d_gp": gp.item(), "d_loss": loss.item()}


def _gen_step(ck: StageACheckpoint, x_s, x_t) -> dict[str, float]:
    w = ck.config.weights
    with frozen(ck.disc_s, ck.disc_t):
        fake_t = ck.gen_st(x_s)
        fake_s = ck.gen_ts(x_t)
        rec_s = ck.gen_ts(fake_t)
        rec_t = ck.gen_st(fake_s)
        bundle = LossBundle(
            {
                "g_adv_st": generator_adv_loss(ck.disc_t.score(fake_t)),
                "g_adv_ts": generator_adv_loss(ck.disc_s.score(fake_s)),
                "cyc": cycle_loss(x_s, rec_s, x_t, rec_t),
            },
            {"g_adv_st": w.lambda_adv, "g_adv_ts": w.lambda_adv, "cyc": w.lambda_cyc},
        )
        loss = bundle.total
        ck.opt_gen.zero_grad(set_to_none=True)
        loss.backward()
        ck.opt_gen.step()
        ck.opt_gen.zero_grad(set_to_none=True)
    out = bundle.scalars()
    out["g_total"] = out.pop("total")
    return out


def train_stage_a(
    cfg: StageAConfig,
    src: TileManifest,
    tgt: TileManifest,
    out_dir=None,
    resume: bool = False,
    metrics_log: MetricsLog | None = None,
) -> StageACheckpoint:
    """Train both ResiGenerators and both critics.

    One epoch is one pass over the source tiles in random order, each
    source batch paired with a uniformly drawn target batch. Checkpoints go
    to ``out_dir/stage_a/epoch_NNN.ckpt`` after every epoch and to
    ``final.ckpt`` at the end.
    """
    if not len(src) or not len(tgt):
        raise ValidationError("stage A needs non-empty source and target manifests")
    if cfg.resize_placement == "none":
        log.warning("resize_placement='none': scale compatibility is not enforced")
    else:
        rep = check_scale_compat(src.domain, tgt.domain, cfg.scale_tol)
        if not rep.passed:
            raise ValidationError(
                f"scale check failed: tile ratio {rep.h_ratio:.4f} vs resolution ratio {rep.r_ratio:.4f} "
                f"(relative error {rep.rel_error:.4f} > {cfg.scale_tol})"
            )
    out_dir = Path(out_dir) if out_dir is not None else None
    if metrics_log is None:
        metrics_log = MetricsLog(out_dir / "stage_a_losses.jsonl" if out_dir else None, "stage_a")

    ck = None
    if resume and out_dir is not None:
        last = latest_checkpoint(out_dir)
        if last is not None:
            ck = StageACheckpoint.load(last, restore_rng=True)
            log.info("resuming stage A from %s (epoch %d)", last, ck.epoch)
    if ck is None:
        ck = StageACheckpoint.fresh(cfg, src.domain, tgt.domain)

    src_store = TileStore(src, transform=source_transform(cfg.resize_placement, tgt.domain.tile_px))
    tgt_store = TileStore(tgt)
    bs = cfg.batch_size
    n_src, n_tgt = len(src_store), len(tgt_store)

    with deterministic_mode(cfg.deterministic):
        for epoch in range(ck.epoch + 1, cfg.epochs + 1):
            for m in (ck.gen_st, ck.gen_ts, ck.disc_s, ck.disc_t):
                m.train()
            order = torch.randperm(n_src, generator=ck.sampler)
            sums: dict[str, list[float]] = {}
            for start in range(0, n_src, bs):
                x_s = src_store.batch(order[start : start + bs].tolist())
                t_idx = torch.randint(0, n_tgt, (x_s.shape[0],), generator=ck.sampler)
                x_t = tgt_store.batch(t_idx.tolist())
                vals = _disc_step(ck, x_s, x_t, ck.gp_sampler)
                ck.disc_steps += 1
                if ck.disc_steps % cfg.critic_iters == 0:
                    vals.update(_gen_step(ck, x_s, x_t))
                    ck.gen_steps += 1
                    assert ck.disc_steps == ck.gen_steps * cfg.critic_iters
                if not all(math.isfinite(v) for v in vals.values()):
                    ck.epoch = epoch - 1
                    if out_dir is not None:
                        ck.save(out_dir / "stage_a" / "abort.ckpt")
                    raise TrainingDiverged(f"non-finite stage A loss at disc step {ck.disc_steps}: {vals}")
                metrics_log.log(ck.disc_steps, vals)
                for k, v in vals.items():
                    sums.setdefault(k, []).append(v)
            ck.epoch = epoch
            summary = {k: float(np.mean(v)) for k, v in sums.items()}
            summary.update(epoch=epoch, disc_steps=ck.disc_steps, gen_steps=ck.gen_steps,
                           k_st=ck.gen_st.k.item(), k_ts=ck.gen_ts.k.item())
            ck.history.append(summary)
            log.info("stage A epoch %d: %s", epoch, {k: round(v, 4) for k, v in summary.items()})
            if out_dir is not None:
                ck.save(out_dir / "stage_a" / f"epoch_{epoch:03d}.ckpt")
    if out_dir is not None:
        ck.save(out_dir / "stage_a" / "final.ckpt")
    return ck


@torch.no_grad()
def translate_dataset(
    ck: StageACheckpoint, manifest: TileManifest, direction: str = "s2t", out_dir=None
) -> TileManifest:
    """Map every tile through one generator (eval mode) and write a new manifest.

    Labels, when present, are nearest-resized (or cropped, for the no-resize
    placement) to the translated tile size.
    """
    gen = ck.generator(direction)
    cfg = ck.config
    dst = ck.tgt_domain if direction == "s2t" else ck.src_domain
    placement = cfg.resize_placement
    out_px = gen.config.out_px
    if placement == "in_network":
        gsd = dst.gsd_cm
    elif placement == "pre":
        gsd = manifest.domain.gsd_cm * manifest.domain.tile_px / out_px
    else:  # cropped, ground resolution unchanged
        gsd = manifest.domain.gsd_cm
    domain = DomainSpec(
        f"{manifest.domain.name}_to_{dst.name}", gsd, out_px, manifest.domain.channels,
        dst.band_order, manifest.domain.palette,
    )
    if out_dir is None:
        raise ValueError("translate_dataset needs an output directory")
    out_dir = Path(out_dir)
    records = []
    transform = source_transform(placement, ck.tgt_domain.tile_px) if direction == "s2t" else None
    store = TileStore(manifest, with_labels=manifest.annotated, transform=transform, cache_bytes=0)
    gen.eval()
    for i, rec in enumerate(manifest.tiles):
        img, lab = store.arrays(i)
        y = gen(image_to_tensor(img)[None])[0]
        stem = Path(rec.image_path).stem
        img_rel = f"images/{stem}.png"
        save_image(out_dir / img_rel, tensor_to_image(y))
        lab_rel = None
        if lab is not None:
            lab = resize_labels_nearest(lab, out_px)
            lab_rel = f"labels/{stem}.png"
            save_image(out_dir / lab_rel, decode_labels(lab, domain.palette))
        records.append(TileRecord(img_rel, lab_rel, rec.raster_id, rec.row, rec.col, rec.split))
    out = TileManifest(domain, records, out_dir.resolve())
    out.dump(out_dir / "manifest.jsonl")
    return out
