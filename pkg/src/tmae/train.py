"""Training loops: masked pretraining and supervised fine-tuning.

Learning rate follows a linear warmup into a cosine decay, with the peak
scaled linearly by batch size (peak = base_lr * batch_size / 256). Early
stopping watches the epoch-mean reconstruction loss (configurable to the
total loss) and stops after `patience` consecutive epochs without an
improvement of at least `min_delta`.

Every random draw is derived functionally from (seed, epoch, clip index),
so runs are reproducible and resuming from a checkpoint replays the exact
schedule an uninterrupted run would have produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import (
    Checkpoint,
    arrays_from_model,
    load_checkpoint,
    load_params_into_model,
    save_checkpoint,
)
from .config import Config
from .datasets import ClipStore
from .errors import (
    ConfigError,
    DivergenceDetected,
    EmptyManifest,
    IncompatibleCheckpoint,
    NonFiniteGradient,
)
from .evaluation import label_from_ef
from .losses import (
    ContrastiveParams,
    reconstruction_loss,
    temporal_contrastive_loss,
)
from .masking import make_mask_plan
from .model import TemporalMAE, build_model_from_config
from .tokenizer import patchify
from .utils import atomic_write_text, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    """Resolved hyperparameters for one training run (pretrain or finetune)."""

    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    batch_size: int = 32
    warmup_epochs: int = 200
    max_epochs: int = 1600
    min_lr: float = -1.0  # -1: peak / 100
    patience: int = 75
    min_delta: float = 5e-5
    grad_clip: float = 1.0
    monitor: str = "rec"
    mode: str = "end_to_end"
    use_contrastive: bool = True
    oracle: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not (0 < self.warmup_epochs < self.max_epochs):
            raise ConfigError(
                f"need 0 < warmup_epochs < max_epochs, got {self.warmup_epochs}, {self.max_epochs}"
            )
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not self.min_delta > 0:
            raise ConfigError("min_delta must be positive")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0

    @property
    def floor_lr(self) -> float:
        return self.min_lr if self.min_lr >= 0 else self.peak_lr / 100.0


def make_train_config(cfg: Config, stage: str = "pretrain") -> TrainConfig:
    """Resolve the [train] section for one stage; ft_* keys override for finetune."""
    t = cfg.values["train"]
    base_lr = t["base_lr"]
    max_epochs = t["max_epochs"]
    warmup = t["warmup_epochs"]
    if stage == "finetune":
        max_epochs = t["ft_max_epochs"]
        if t["ft_base_lr"] > 0:
            base_lr = t["ft_base_lr"]
        warmup = t["ft_warmup_epochs"]
        if warmup < 0:
            warmup = max(1, round(0.05 * max_epochs))
    elif stage != "pretrain":
        raise ValueError(f"unknown stage {stage!r}")
    return TrainConfig(
        base_lr=base_lr,
        weight_decay=t["weight_decay"],
        batch_size=t["batch_size"],
        warmup_epochs=warmup,
        max_epochs=max_epochs,
        min_lr=t["min_lr"],
        patience=t["patience"],
        min_delta=t["min_delta"],
        grad_clip=t["grad_clip"],
        monitor=t["monitor"],
        mode=t["mode"],
        use_contrastive=t["use_contrastive"],
        oracle=t["oracle"],
        seed=t["seed"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
    )


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Warmup/cosine schedule value at a (possibly fractional) epoch."""
    peak = cfg.peak_lr
    floor = cfg.floor_lr
    if epoch <= cfg.warmup_epochs:
        return peak * epoch / cfg.warmup_epochs
    epoch = min(epoch, cfg.max_epochs)
    progress = (epoch - cfg.warmup_epochs) / (cfg.max_epochs - cfg.warmup_epochs)
    return floor + (peak - floor) * (1.0 + math.cos(math.pi * progress)) / 2.0


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamWState:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, torch.Tensor]) -> "AdamWState":
        return cls(
            exp_avg={n: torch.zeros_like(p) for n, p in params.items()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in params.items()},
        )


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay shrinks parameters first (p -= lr * wd * p), then the
    bias-corrected moment update is applied. Raises NonFiniteGradient
    before touching any state if a gradient is not finite.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> tuple[float, bool]:
    """Scale gradients so their global L2 norm is at most max_norm."""
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
    norm = float(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        with torch.no_grad():
            for g in grads.values():
                g.mul_(scale)
        return norm, True
    return norm, False


# --- early stopping --------------------------------------------------------


@dataclass(frozen=True)
class EarlyStopState:
    best_loss: float = math.inf
    epochs_since_improve: int = 0
    stopped: bool = False


def early_stop_update(
    state: EarlyStopState, epoch_loss: float, cfg: TrainConfig
) -> tuple[EarlyStopState, bool]:
    """Advance the early-stopping state; returns (new state, improved)."""
    improved = state.best_loss - epoch_loss >= cfg.min_delta
    if improved:
        return EarlyStopState(best_loss=epoch_loss, epochs_since_improve=0), True
    count = state.epochs_since_improve + 1
    return (
        EarlyStopState(
            best_loss=state.best_loss,
            epochs_since_improve=count,
            stopped=count >= cfg.patience,
        ),
        False,
    )


# --- shared loop machinery ---------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    l_rec: float
    l_contrast: float
    l_total: float
    lr: float
    early_stop_counter: int

    def csv(self) -> str:
        return (
            f"{self.epoch},{self.l_rec!r},{self.l_contrast!r},"
            f"{self.l_total!r},{self.lr!r},{self.early_stop_counter}"
        )


LOSS_CSV_HEADER = "epoch,l_rec,l_contrast,l_total,lr,early_stop_counter"


def write_loss_csv(rows: list[EpochRow], path: Path) -> None:
    atomic_write_text(path, "\n".join([LOSS_CSV_HEADER] + [r.csv() for r in rows]) + "\n")


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    curve_path: Path
    rows: list[EpochRow] = field(default_factory=list)
    stopped_early: bool = False


def _shuffled(indices: list[int], seed: int, epoch: int) -> list[int]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, epoch))))
    order = rng.permutation(len(indices))
    return [indices[i] for i in order]


def _batches(order: list[int], size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _checkpoint_from(
    model: TemporalMAE,
    opt: AdamWState,
    cfg_echo: dict,
    epoch: int,
    early: EarlyStopState,
) -> Checkpoint:
    arrays = arrays_from_model(model)
    for name, m in opt.exp_avg.items():
        arrays[f"opt.exp_avg.{name}"] = m.detach().cpu().numpy()
    for name, v in opt.exp_avg_sq.items():
        arrays[f"opt.exp_avg_sq.{name}"] = v.detach().cpu().numpy()
    arrays["opt.step"] = np.array(opt.step, dtype=np.int64)
    best = early.best_loss
    return Checkpoint(
        config=cfg_echo,
        arrays=arrays,
        epoch=epoch,
        global_step=opt.step,
        best_loss=None if math.isinf(best) else best,
        epochs_since_improve=early.epochs_since_improve,
        rng_torch=torch.get_rng_state().numpy().tobytes(),
    )


def _load_optimizer(ckpt: Checkpoint, params: dict[str, torch.Tensor]) -> AdamWState:
    opt = AdamWState.init(params)
    for name, p in params.items():
        for prefix, target in (("opt.exp_avg.", opt.exp_avg), ("opt.exp_avg_sq.", opt.exp_avg_sq)):
            key = prefix + name
            if key not in ckpt.arrays:
                raise IncompatibleCheckpoint(f"checkpoint lacks optimizer entry {key}")
            target[name] = torch.from_numpy(ckpt.arrays[key]).to(p.dtype)
    opt.step = int(ckpt.arrays["opt.step"])
    return opt


# --- pretraining --------------------------------------------------------------


def pretrain(
    store: ClipStore,
    cfg: Config,
    out_dir: Path | str,
    resume: Optional[Path | str] = None,
    stop_after: Optional[int] = None,
    log: Callable[[str], None] = print,
) -> TrainResult:
    """Masked-reconstruction (+ optional contrastive) pretraining on the train split.

    stop_after interrupts the run after that many epochs (checkpoint intact),
    for walltime-budgeted runs that are continued later with --resume.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = make_train_config(cfg, "pretrain")
    d = cfg.values["data"]
    T, H, W, window_s = d["frames"], d["height"], d["width"], d["window_s"]
    ratio = cfg.get("mask", "ratio")
    if not ratio > 0:
        raise ConfigError("pretraining needs mask.ratio > 0")
    cparams = ContrastiveParams(
        tau_p=cfg.get("loss", "tau_p"),
        tau_m=cfg.get("loss", "tau_m"),
        weight=cfg.get("loss", "lambda"),
    )
    contrastive_on = tc.use_contrastive and cparams.weight > 0

    train_idx = store.split("train")
    if not train_idx:
        raise EmptyManifest("train split is empty")

    model = build_model_from_config(cfg, init_seed=derive_seed(tc.seed, "init"))
    log(f"model parameters: {model.count_params()}")
    patch_cfg = model.patch_cfg
    N = patch_cfg.N

    trainable = {
        n: p for n, p in model.named_parameters() if not n.startswith("head.")
    }
    opt = AdamWState.init(trainable)
    early = EarlyStopState()
    rows: list[EpochRow] = []
    start_epoch = 1
    cfg_echo = cfg.echo()

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != cfg_echo:
            raise IncompatibleCheckpoint(
                "resume config differs from checkpoint config echo"
            )
        load_params_into_model(ckpt, model)
        opt = _load_optimizer(ckpt, trainable)
        early = EarlyStopState(
            best_loss=math.inf if ckpt.best_loss is None else ckpt.best_loss,
            epochs_since_improve=ckpt.epochs_since_improve,
        )
        start_epoch = ckpt.epoch + 1
        rows = _read_loss_csv(out_dir / "loss_pretrain.csv", upto=ckpt.epoch)
        if ckpt.rng_torch:
            torch.set_rng_state(torch.frombuffer(bytearray(ckpt.rng_torch), dtype=torch.uint8))
        log(f"resumed from {resume} at epoch {ckpt.epoch}")

    shuffle_seed = derive_seed(tc.seed, "shuffle")
    sample_seed = derive_seed(tc.seed, "sample")
    mask_seed = derive_seed(tc.seed, "mask")
    best_path = out_dir / "pretrain.ckpt"
    last_path = out_dir / "pretrain_last.ckpt"
    curve_path = out_dir / "loss_pretrain.csv"
    result = TrainResult(best_path, last_path, curve_path, rows)

    for epoch in range(start_epoch, tc.max_epochs + 1):
        lr = lr_at(epoch, tc)
        order = _shuffled(train_idx, shuffle_seed, epoch)
        sums = np.zeros(3)  # rec, contrast, total (clip-weighted)
        for batch in _batches(order, tc.batch_size):
            clips = []
            plans = []
            for idx in batch:
                start = store.start_frame(
                    idx, tc.oracle, T, window_s, sample_seed, epoch, randomize=True
                )
                clips.append(
                    store.sample(idx, start, T, window_s, H, W, cache=tc.oracle).frames
                )
                plans.append(
                    make_mask_plan(T, N, ratio, derive_seed(mask_seed, epoch, idx))
                )
            frames = torch.from_numpy(np.stack(clips))
            out = model.forward_pretrain(frames, plans)
            target = patchify(frames, patch_cfg)
            l_rec = reconstruction_loss(out.pred, target, plans)
            if contrastive_on:
                l_con = temporal_contrastive_loss(out.frame_feats, cparams)
                l_total = l_rec + cparams.weight * l_con
            else:
                l_con = torch.zeros(())
                l_total = l_rec
            model.zero_grad(set_to_none=True)
            l_total.backward()
            grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
            norm, clipped = clip_grad_norm(grads, tc.grad_clip)
            if clipped:
                log(f"epoch {epoch}: clipped gradient norm {norm:.3f}")
            try:
                adamw_step(
                    trainable, grads, opt, lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay
                )
            except NonFiniteGradient as exc:
                log(f"epoch {epoch}: {exc}; step skipped")
            b = len(batch)
            sums += b * np.array(
                [l_rec.item(), l_con.item(), l_total.item()], dtype=np.float64
            )
        n = len(order)
        mean_rec, mean_con, mean_total = (sums / n).tolist()
        if not all(map(math.isfinite, (mean_rec, mean_con, mean_total))):
            raise DivergenceDetected(f"non-finite epoch loss at epoch {epoch}")
        monitored = mean_rec if tc.monitor == "rec" else mean_total
        early, improved = early_stop_update(early, monitored, tc)
        rows.append(EpochRow(epoch, mean_rec, mean_con, mean_total, lr, early.epochs_since_improve))
        write_loss_csv(rows, curve_path)
        ckpt = _checkpoint_from(model, opt, cfg_echo, epoch, early)
        save_checkpoint(ckpt, last_path)
        if improved:
            save_checkpoint(ckpt, best_path)
        if epoch == start_epoch or epoch % 25 == 0 or early.stopped:
            log(
                f"epoch {epoch}: l_rec={mean_rec:.6f} l_contrast={mean_con:.6f} "
                f"l_total={mean_total:.6f} lr={lr:.3e} wait={early.epochs_since_improve}"
            )
        if early.stopped:
            result.stopped_early = True
            log(f"early stop at epoch {epoch} (patience {tc.patience})")
            break
        if stop_after is not None and epoch >= stop_after:
            log(f"stopping after epoch {epoch} as requested; resume from {last_path}")
            break
    return result


def _read_loss_csv(path: Path, upto: int) -> list[EpochRow]:
    if not path.is_file():
        return []
    rows = []
    with open(path, encoding="utf-8") as f:
        next(f, None)
        for line in f:
            parts = line.strip().split(",")
            if len(parts) != 6:
                continue
            row = EpochRow(
                int(parts[0]), float(parts[1]), float(parts[2]),
                float(parts[3]), float(parts[4]), int(parts[5]),
            )
            if row.epoch <= upto:
                rows.append(row)
    return rows


# --- fine-tuning ---------------------------------------------------------------


def finetune(
    store: ClipStore,
    cfg: Config,
    pretrained: Path | str,
    out_dir: Path | str,
    log: Callable[[str], None] = print,
) -> TrainResult:
    """Binary cross-entropy fine-tuning of the classifier (and optionally encoder).

    In base mode every non-head parameter is frozen: encoder gradients are
    never computed and encoder weights are bit-identical afterwards.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(pretrained)
    cfg = adopt_checkpoint_config(cfg, ckpt)
    tc = make_train_config(cfg, "finetune")
    d = cfg.values["data"]
    T, H, W, window_s = d["frames"], d["height"], d["width"], d["window_s"]

    model = build_model_from_config(cfg, init_seed=derive_seed(tc.seed, "init"))
    load_params_into_model(ckpt, model)

    train_idx = store.split("train")
    if not train_idx:
        raise EmptyManifest("train split is empty")
    labels = {
        idx: 1.0 if label_from_ef(store.records[idx].ef_percent) else 0.0
        for idx in train_idx
    }

    if tc.mode == "base":
        for name, p in model.named_parameters():
            if not name.startswith("head."):
                p.requires_grad_(False)
        trainable = {n: p for n, p in model.named_parameters() if n.startswith("head.")}
    else:
        trainable = dict(model.named_parameters())
    opt = AdamWState.init(trainable)
    early = EarlyStopState()
    rows: list[EpochRow] = []
    cfg_echo = cfg.echo()

    shuffle_seed = derive_seed(tc.seed, "ft_shuffle")
    sample_seed = derive_seed(tc.seed, "ft_sample")
    best_path = out_dir / "finetune.ckpt"
    last_path = out_dir / "finetune_last.ckpt"
    curve_path = out_dir / "loss_finetune.csv"
    result = TrainResult(best_path, last_path, curve_path, rows)

    cls_cache: dict[tuple[int, int], torch.Tensor] = {}

    for epoch in range(1, tc.max_epochs + 1):
        lr = lr_at(epoch, tc)
        order = _shuffled(train_idx, shuffle_seed, epoch)
        loss_sum = 0.0
        for batch in _batches(order, tc.batch_size):
            starts = [
                store.start_frame(idx, tc.oracle, T, window_s, sample_seed, epoch, randomize=True)
                for idx in batch
            ]
            y = torch.tensor([labels[idx] for idx in batch])
            if tc.mode == "base":
                logits = _frozen_logits(model, store, batch, starts, T, window_s, H, W, cls_cache, tc.oracle)
            else:
                frames = torch.from_numpy(
                    np.stack(
                        [
                            store.sample(i, s, T, window_s, H, W, cache=tc.oracle).frames
                            for i, s in zip(batch, starts)
                        ]
                    )
                )
                logits = model.score_clips(frames)
            loss = F.binary_cross_entropy_with_logits(logits, y)
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
            norm, clipped = clip_grad_norm(grads, tc.grad_clip)
            if clipped:
                log(f"epoch {epoch}: clipped gradient norm {norm:.3f}")
            try:
                adamw_step(
                    trainable, grads, opt, lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay
                )
            except NonFiniteGradient as exc:
                log(f"epoch {epoch}: {exc}; step skipped")
            loss_sum += loss.item() * len(batch)
        mean_loss = loss_sum / len(order)
        if not math.isfinite(mean_loss):
            raise DivergenceDetected(f"non-finite fine-tuning loss at epoch {epoch}")
        early, improved = early_stop_update(early, mean_loss, tc)
        rows.append(EpochRow(epoch, mean_loss, 0.0, mean_loss, lr, early.epochs_since_improve))
        write_loss_csv(rows, curve_path)
        out_ckpt = _checkpoint_from(model, opt, cfg_echo, epoch, early)
        save_checkpoint(out_ckpt, last_path)
        if improved:
            save_checkpoint(out_ckpt, best_path)
        if epoch == 1 or epoch % 25 == 0 or early.stopped:
            log(f"epoch {epoch}: bce={mean_loss:.6f} lr={lr:.3e} wait={early.epochs_since_improve}")
        if early.stopped:
            result.stopped_early = True
            log(f"early stop at epoch {epoch} (patience {tc.patience})")
            break
    return result


def _frozen_logits(
    model: TemporalMAE,
    store: ClipStore,
    batch: list[int],
    starts: list[int],
    T: int,
    window_s: float,
    H: int,
    W: int,
    cache: dict[tuple[int, int], torch.Tensor],
    cacheable: bool,
) -> torch.Tensor:
    """Base-mode logits: frozen-encoder CLS features feed the trainable head."""
    feats = []
    missing = [(i, s) for i, s in zip(batch, starts) if (i, s) not in cache or not cacheable]
    if missing:
        frames = torch.from_numpy(
            np.stack([store.sample(i, s, T, window_s, H, W, cache=cacheable).frames for i, s in missing])
        )
        with torch.no_grad():
            cls, _ = model.encode_clips(frames)
        for (i, s), vec in zip(missing, cls):
            if cacheable:
                cache[(i, s)] = vec
        fresh = dict(zip(missing, cls))
    else:
        fresh = {}
    for i, s in zip(batch, starts):
        feats.append(cache.get((i, s), fresh.get((i, s))))
    return model.classify(torch.stack(feats))


def adopt_checkpoint_config(cfg: Config, ckpt: Checkpoint) -> Config:
    """Merge a checkpoint's architecture-defining sections into cfg.

    The checkpoint wins for [model], [mask], [loss] and the clip geometry
    keys of [data]; a conflicting explicitly-set value raises
    IncompatibleCheckpoint.
    """
    locked = [("model", k) for k in cfg.values["model"]]
    locked += [("mask", "ratio")]
    locked += [("loss", k) for k in cfg.values["loss"]]
    locked += [("data", k) for k in ("frames", "height", "width", "window_s")]
    merged = Config(values=cfg.echo(), explicit=set(cfg.explicit))
    for section, key in locked:
        stored = ckpt.config[section][key]
        current = cfg.values[section][key]
        if cfg.is_explicit(section, key) and current != stored:
            raise IncompatibleCheckpoint(
                f"[{section}] {key} = {current!r} conflicts with checkpoint value {stored!r}"
            )
        merged.values[section][key] = stored
    return merged
