"""Teacher training (AE / VAE / adversarial-latent) and student distillation
with reproducible seeding, validation-based checkpoint selection, and run
directories (config.resolved.json, seed_k/checkpoint.bin, seed_k/log.jsonl,
aggregate.json).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datagen import WindowedDataset
from .losses import (
    _scalar,
    BaselineKdParams,
    SckdParams,
    at_loss,
    ground_truth_loss,
    inter_intra_kd_loss,
    representation_loss,
    sp_loss,
    temporal_softmax,
    total_sckd_loss,
    vanilla_kd_loss,
    wae_discriminator_loss,
    wae_model_loss,
)
from .models import (
    GrfNetwork,
    NetworkSpec,
    build_network,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

DISTILLERS = ("scratch", "kd", "at", "sp", "kd_sp", "dist", "sckd")
MODES = ("ae", "vae", "wae")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float | None = None  # None resolves per encoder: 0.01 c3d/i3d, 0.001 r2plus1d
    seed: int = 0
    window: int = 200
    mode: str = "ae"
    distiller: str = "scratch"
    encoder_kind: str = "c3d"
    scale: str = "teacher"
    mid_channels: int = 64
    val_subject: int | None = None  # held-in subject used for checkpoint selection
    grad_clip: float = 5.0
    beta_kl: float = 1.0
    lambda_adv: float = 1.0
    baseline_weight: float = 1.0  # weight of the AT/SP/DIST auxiliary terms
    sckd: SckdParams = field(default_factory=SckdParams)
    kd: BaselineKdParams = field(default_factory=BaselineKdParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; use one of {MODES}")
        if self.distiller not in DISTILLERS:
            raise ValueError(f"unknown distiller {self.distiller!r}; use one of {DISTILLERS}")
        if isinstance(self.sckd, dict):
            self.sckd = SckdParams(**self.sckd)
        if isinstance(self.kd, dict):
            self.kd = BaselineKdParams(**self.kd)

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.001 if self.encoder_kind == "r2plus1d" else 0.01

    def to_dict(self) -> dict:
        out = asdict(self)
        out["resolved_lr"] = self.resolved_lr
        return out


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: 30 epochs, batch 32, window 100, narrow networks."""
    base = dict(epochs=30, batch_size=32, window=100, mid_channels=8)
    base.update(overrides)
    return TrainConfig(**base)


def _tensors(dataset: WindowedDataset) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(dataset.insole), torch.from_numpy(dataset.grf)


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed * 1_000_003 + epoch)
    return gen


def rotated_val_subject(subjects: list[int], held_out: int | None = None) -> int:
    """Deterministic validation-subject rotation among held-in subjects."""
    remaining = [s for s in subjects if s != held_out]
    if not remaining:
        raise ValueError("no subjects left for validation")
    if held_out is None:
        return remaining[-1]
    bigger = [s for s in remaining if s > held_out]
    return bigger[0] if bigger else remaining[0]


def _train_val_split(dataset: WindowedDataset, val_subject: int | None):
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise ValueError("need at least two subjects for a train/validation split")
    val = val_subject if val_subject is not None else subjects[-1]
    if val not in subjects:
        raise ValueError(f"validation subject {val} not in dataset ({subjects})")
    mask = dataset.subject_ids == val
    return dataset.subset(~mask), dataset.subset(mask), val


def build_wae_discriminator(mid_channels: int) -> nn.Sequential:
    """Code discriminator on time-pooled latents.

    Full scale uses five linear and four ReLU layers; narrow desk-scale models
    (mid_channels < 64) use a three-linear-layer stack.
    """
    if mid_channels >= 64:
        dims = [mid_channels, 256, 256, 256, 256, 1]
    else:
        dims = [mid_channels, 64, 64, 1]
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


@torch.no_grad()
def _validate(network: GrfNetwork, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> dict:
    network.eval()
    total_sq, total_n = 0.0, 0
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo : lo + batch_size]
        yb = y[lo : lo + batch_size]
        pred = network(xb)
        total_sq += float(((pred - yb) ** 2).sum())
        total_n += yb.numel()
    network.train()
    mse = total_sq / max(total_n, 1)
    return {"val_loss": mse, "val_rmse": float(np.sqrt(mse))}


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not bool(torch.isfinite(loss)):
        raise RuntimeError(f"training diverged: non-finite loss at {where}")


def _write_log(path: Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_teacher(config: TrainConfig, dataset: WindowedDataset, out_dir: str | Path) -> dict:
    """Train an encoder-decoder with the configured representation objective.

    Saves the best-validation checkpoint plus a JSONL log of per-epoch train
    and validation losses; the adversarial mode alternates a discriminator
    step and a reconstruction+adversarial step on every batch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    train_ds, val_ds, val_subject = _train_val_split(dataset, config.val_subject)
    x_train, y_train = _tensors(train_ds)
    x_val, y_val = _tensors(val_ds)

    spec = NetworkSpec(
        encoder_kind=config.encoder_kind,
        scale=config.scale,
        mid_channels=config.mid_channels,
        window=config.window,
    )
    network = build_network(spec, init_seed=config.seed)
    vae_head = discriminator = None
    with torch.random.fork_rng():
        torch.manual_seed(config.seed + 101)
        if config.mode == "vae":
            vae_head = nn.Conv1d(config.mid_channels, 2 * config.mid_channels, kernel_size=1)
        elif config.mode == "wae":
            discriminator = build_wae_discriminator(config.mid_channels)

    optimizer = torch.optim.Adam(network.parameters(), lr=config.resolved_lr)
    disc_optimizer = (
        torch.optim.Adam(discriminator.parameters(), lr=config.resolved_lr)
        if discriminator is not None
        else None
    )
    if vae_head is not None:
        optimizer.add_param_group({"params": vae_head.parameters()})

    records: list[dict] = []
    best = {"val_rmse": float("inf"), "epoch": -1, "state": None}
    network.train()
    n = x_train.shape[0]
    for epoch in range(config.epochs):
        gen = _epoch_generator(config.seed, epoch)
        perm = torch.randperm(n, generator=gen)
        epoch_losses, epoch_parts = [], {}
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            if discriminator is not None:
                # stage 1: discriminator learns prior vs encoded codes
                _, _, mid = network.encode(xb)
                codes = mid.mean(dim=-1)
                prior = torch.empty_like(codes).normal_(generator=gen)
                disc_loss = wae_discriminator_loss(codes, prior, discriminator)
                _check_finite(disc_loss, f"epoch {epoch} (discriminator)")
                disc_optimizer.zero_grad()
                disc_loss.backward()
                torch.nn.utils.clip_grad_norm_(discriminator.parameters(), config.grad_clip)
                disc_optimizer.step()
                # stage 2: reconstruction plus the adversarial push toward the prior
                _, _, y_hat = network.decode(mid)
                loss, mse, adv = wae_model_loss(y_hat, yb, codes, discriminator, config.lambda_adv)
                parts = {"mse": mse, "adv": adv, "disc_loss": disc_loss}
            else:
                result = representation_loss(
                    config.mode, xb, yb, network, vae_head=vae_head,
                    beta=config.beta_kl, generator=gen,
                )
                loss, parts = result.total, result.parts
            _check_finite(loss, f"epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(network.parameters(), config.grad_clip)
            optimizer.step()
            epoch_losses.append(_scalar(loss))
            for key, value in parts.items():
                epoch_parts.setdefault(key, []).append(_scalar(value))

        record = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        for key, values in epoch_parts.items():
            record[key] = float(np.mean(values))
        record.update(_validate(network, x_val, y_val, config.batch_size))
        records.append(record)
        if record["val_rmse"] < best["val_rmse"]:
            best = {
                "val_rmse": record["val_rmse"],
                "epoch": epoch,
                "state": {k: v.detach().clone() for k, v in network.state_dict().items()},
            }

    network.load_state_dict(best["state"])
    aux = {}
    if vae_head is not None:
        aux["vae_head"] = vae_head
    if discriminator is not None:
        aux["discriminator"] = discriminator
    extra = {
        "task": "teacher",
        "mode": config.mode,
        "val_subject": val_subject,
        "best_epoch": best["epoch"],
        "best_val_rmse": best["val_rmse"],
        "last_epoch": config.epochs - 1,
        "last_val_rmse": records[-1]["val_rmse"],
        "lr": config.resolved_lr,
    }
    save_checkpoint(out / "checkpoint.bin", network, config.seed, best["epoch"], extra=extra, aux=aux)
    _write_log(out / "log.jsonl", records)
    return extra


def _distill_step_loss(
    config: TrainConfig,
    y_s: torch.Tensor,
    y_gt: torch.Tensor,
    y_t: torch.Tensor | None,
    taps_t,
    taps_s,
) -> tuple[torch.Tensor, dict[str, float]]:
    distiller = config.distiller
    breakdown = {"L_gt": 0.0, "L_KD_c": 0.0, "L_sc_r": 0.0, "L_sc_f": 0.0}
    if distiller == "scratch":
        loss = ground_truth_loss(y_s, y_gt)
        breakdown["L_gt"] = _scalar(loss)
    elif distiller == "sckd":
        loss, breakdown = total_sckd_loss(y_s, y_gt, y_t, taps_t, taps_s, config.sckd)
        return loss, breakdown
    elif distiller == "kd":
        l_gt = ground_truth_loss(y_s, y_gt)
        l_kd = vanilla_kd_loss(y_t, y_s, config.kd)
        loss = config.kd.alpha * l_gt + (1 - config.kd.alpha) * l_kd
        breakdown.update(L_gt=_scalar(l_gt), L_kd_tau=_scalar(l_kd))
    elif distiller == "at":
        l_gt = ground_truth_loss(y_s, y_gt)
        l_at = at_loss(taps_t, taps_s)
        loss = l_gt + config.baseline_weight * l_at
        breakdown.update(L_gt=_scalar(l_gt), L_at=_scalar(l_at))
    elif distiller == "sp":
        l_gt = ground_truth_loss(y_s, y_gt)
        l_sp = sp_loss(taps_t, taps_s)
        loss = l_gt + config.baseline_weight * l_sp
        breakdown.update(L_gt=_scalar(l_gt), L_sp=_scalar(l_sp))
    elif distiller == "kd_sp":
        l_gt = ground_truth_loss(y_s, y_gt)
        l_kd = vanilla_kd_loss(y_t, y_s, config.kd)
        l_sp = sp_loss(taps_t, taps_s)
        loss = config.kd.alpha * l_gt + (1 - config.kd.alpha) * l_kd + config.baseline_weight * l_sp
        breakdown.update(L_gt=_scalar(l_gt), L_kd_tau=_scalar(l_kd), L_sp=_scalar(l_sp))
    elif distiller == "dist":
        l_gt = ground_truth_loss(y_s, y_gt)
        l_ii = inter_intra_kd_loss(temporal_softmax(y_t), temporal_softmax(y_s))
        loss = l_gt + config.baseline_weight * l_ii
        breakdown.update(L_gt=_scalar(l_gt), L_KD_c=_scalar(l_ii))
    else:  # pragma: no cover - guarded by TrainConfig
        raise ValueError(f"unknown distiller {distiller!r}")
    breakdown["total"] = _scalar(loss)
    return loss, breakdown


def distill_student(
    config: TrainConfig,
    teacher_checkpoint: str | Path,
    dataset: WindowedDataset,
    out_dir: str | Path,
) -> dict:
    """Train a compact model under the configured distiller with a frozen teacher.

    The teacher is loaded in eval mode with gradients disabled; its parameter
    checksum is asserted unchanged after training. Per-step loss breakdowns are
    appended to the JSONL log.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    teacher, teacher_header, _ = load_checkpoint(teacher_checkpoint)
    teacher.eval()
    teacher.requires_grad_(False)
    if teacher.spec.window != config.window:
        raise ValueError(
            f"teacher window {teacher.spec.window} differs from configured window {config.window}"
        )
    checksum_before = parameter_checksum(teacher)

    train_ds, val_ds, val_subject = _train_val_split(dataset, config.val_subject)
    x_train, y_train = _tensors(train_ds)
    x_val, y_val = _tensors(val_ds)

    spec = NetworkSpec(
        encoder_kind=config.encoder_kind,
        scale="student",
        mid_channels=teacher.spec.mid_channels,
        window=config.window,
    )
    student = build_network(spec, init_seed=config.seed)
    optimizer = torch.optim.Adam(student.parameters(), lr=config.resolved_lr)

    needs_teacher = config.distiller != "scratch"
    records: list[dict] = []
    best = {"val_rmse": float("inf"), "epoch": -1, "state": None}
    student.train()
    n = x_train.shape[0]
    step = 0
    for epoch in range(config.epochs):
        gen = _epoch_generator(config.seed, epoch)
        perm = torch.randperm(n, generator=gen)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            y_s, taps_s = student.forward_with_taps(xb)
            if needs_teacher:
                with torch.no_grad():
                    y_t, taps_t = teacher.forward_with_taps(xb)
            else:
                y_t = taps_t = None
            loss, breakdown = _distill_step_loss(config, y_s, yb, y_t, taps_t, taps_s)
            _check_finite(loss, f"step {step}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(student.parameters(), config.grad_clip)
            optimizer.step()
            epoch_losses.append(_scalar(loss))
            records.append({"step": step, **breakdown})
            step += 1
        record = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        record.update(_validate(student, x_val, y_val, config.batch_size))
        records.append(record)
        if record["val_rmse"] < best["val_rmse"]:
            best = {
                "val_rmse": record["val_rmse"],
                "epoch": epoch,
                "state": {k: v.detach().clone() for k, v in student.state_dict().items()},
            }

    if parameter_checksum(teacher) != checksum_before:
        raise RuntimeError("teacher parameters changed during distillation")
    student.load_state_dict(best["state"])
    extra = {
        "task": "distill",
        "distiller": config.distiller,
        "teacher_checkpoint": str(teacher_checkpoint),
        "teacher_kind": teacher_header["spec"]["encoder_kind"],
        "val_subject": val_subject,
        "best_epoch": best["epoch"],
        "best_val_rmse": best["val_rmse"],
        "last_epoch": config.epochs - 1,
        "last_val_rmse": records[-1]["val_rmse"],
        "lr": config.resolved_lr,
    }
    save_checkpoint(out / "checkpoint.bin", student, config.seed, best["epoch"], extra=extra)
    _write_log(out / "log.jsonl", records)
    return extra


def _aggregate(per_seed: list[dict]) -> dict:
    keys = [k for k, v in per_seed[0].items() if isinstance(v, (int, float))]
    mean = {k: float(np.mean([m[k] for m in per_seed])) for k in keys}
    std = {k: float(np.std([m[k] for m in per_seed])) for k in keys}
    return {"per_seed": per_seed, "mean": mean, "std": std}


def seeded_run(
    config: TrainConfig,
    dataset: WindowedDataset,
    run_dir: str | Path,
    task: str = "teacher",
    teacher_checkpoint: str | Path | None = None,
    n_seeds: int = 3,
) -> dict:
    """Run the configured training for seeds {s, s+1, ...}; aggregate mean/std.

    Creates run_dir with config.resolved.json, one seed_k/ subdirectory per
    repeat (checkpoint.bin + log.jsonl), and aggregate.json. Refuses to reuse a
    non-empty directory.
    """
    run = Path(run_dir)
    if run.exists() and any(run.iterdir()):
        raise FileExistsError(f"run directory {run} already exists and is not empty")
    run.mkdir(parents=True, exist_ok=True)
    if task not in ("teacher", "distill"):
        raise ValueError(f"unknown task {task!r}")
    if task == "distill" and teacher_checkpoint is None:
        raise ValueError("distill task needs a teacher checkpoint")

    resolved = {
        "task": task,
        "n_seeds": n_seeds,
        "seeds": [config.seed + k for k in range(n_seeds)],
        "teacher_checkpoint": str(teacher_checkpoint) if teacher_checkpoint else None,
        "config": config.to_dict(),
        "dataset": {"n": len(dataset), "window": dataset.window, "subjects": dataset.subjects},
    }
    (run / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))

    per_seed = []
    for k in range(n_seeds):
        seed_cfg = replace(config, seed=config.seed + k)
        seed_dir = run / f"seed_{k}"
        if task == "teacher":
            summary = train_teacher(seed_cfg, dataset, seed_dir)
        else:
            summary = distill_student(seed_cfg, teacher_checkpoint, dataset, seed_dir)
        per_seed.append({"seed": seed_cfg.seed, **{k2: v for k2, v in summary.items() if isinstance(v, (int, float))}})
    aggregate = _aggregate(per_seed)
    (run / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True))
    return aggregate


def loso_run(
    config: TrainConfig,
    dataset: WindowedDataset,
    run_dir: str | Path,
    task: str = "teacher",
    teacher_run: str | Path | None = None,
    n_seeds: int = 3,
) -> dict:
    """Leave-one-subject-out orchestration: one seeded run per held-out subject.

    For distillation, ``teacher_run`` must point at a matching teacher LOSO run;
    each fold uses that fold's seed_0 teacher checkpoint.
    """
    from .datagen import loso_split

    run = Path(run_dir)
    if run.exists() and any(run.iterdir()):
        raise FileExistsError(f"run directory {run} already exists and is not empty")
    run.mkdir(parents=True, exist_ok=True)
    folds = {}
    for sid in dataset.subjects:
        train_ds, _ = loso_split(dataset, sid)
        fold_cfg = replace(config, val_subject=rotated_val_subject(dataset.subjects, sid))
        teacher_ckpt = None
        if task == "distill":
            if teacher_run is None:
                raise ValueError("distill task needs a teacher_run directory")
            teacher_ckpt = Path(teacher_run) / f"fold_{sid}" / "seed_0" / "checkpoint.bin"
        folds[sid] = seeded_run(
            fold_cfg, train_ds, run / f"fold_{sid}", task=task,
            teacher_checkpoint=teacher_ckpt, n_seeds=n_seeds,
        )
    summary = {"folds": {str(k): v["mean"] for k, v in folds.items()}}
    (run / "loso_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
