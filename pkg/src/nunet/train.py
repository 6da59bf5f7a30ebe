"""Training loop, cross-validation orchestration, checkpoints, and
external validation.

The protocol is deliberately plain: binary cross-entropy, Adam with its
default moment coefficients at learning rate 0.001, a fixed number of
epochs (no schedule, no early stopping), and the final-epoch model is
the one evaluated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .arch import NUNet, NUNetConfig, build_nunet, variant_config
from .data import DatasetManifest, FoldPlan, preprocess
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import EvalReport, MetricRecord, binarize, evaluate

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol parameters."""

    epochs: int = 50
    batch_size: int = 12
    learning_rate: float = 0.001
    seed: int = 0
    device: str = "cpu"
    input_size: int = 256
    max_steps: int | None = None  # optional cap for smoke runs

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1 when set, got {self.max_steps}")

    def fingerprint(self) -> str:
        body = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def bce_loss(prob_map: torch.Tensor, target: torch.Tensor,
             eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    if prob_map.shape != target.shape:
        raise ShapeError(f"probability map {tuple(prob_map.shape)} and target "
                         f"{tuple(target.shape)} differ")
    p = prob_map.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


@dataclass
class FoldData:
    """Preprocessed tensors for one split."""

    ids: list[str]
    images: torch.Tensor   # (N, 1, H, W) in [0, 1]
    targets: torch.Tensor  # (N, 1, H, W) in {0, 1}

    def __len__(self) -> int:
        return len(self.ids)


def load_split(manifest: DatasetManifest, ids: list[str], input_size: int,
               divisor: int) -> FoldData:
    """Preprocess the listed samples into stacked tensors."""
    images, targets = [], []
    for sid in ids:
        sample = manifest.by_id(sid)
        img, tgt = preprocess(sample, target_size=input_size, divisor=divisor)
        images.append(torch.from_numpy(img))
        targets.append(torch.from_numpy(tgt))
    return FoldData(ids=list(ids), images=torch.stack(images), targets=torch.stack(targets))


@dataclass
class Checkpoint:
    """Self-describing training artifact.

    Reloading and running the model on a fixed input reproduces the
    saved model's outputs bit-identically.
    """

    state_dict: dict
    arch_config_text: str
    train_config: dict
    fold: int
    epoch: int
    step_losses: list[float]
    epoch_losses: list[float]
    fingerprint: str = ""

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(asdict(self), path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        return cls(**payload)

    @property
    def arch_config(self) -> NUNetConfig:
        return NUNetConfig.from_text(self.arch_config_text)

    def build_model(self) -> NUNet:
        model = build_nunet(self.arch_config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def _fingerprint(arch_cfg: NUNetConfig, cfg: TrainConfig) -> str:
    body = arch_cfg.to_text() + cfg.fingerprint()
    return hashlib.sha256(body.encode()).hexdigest()[:16]


def _batches(order: list[int], batch_size: int) -> list[list[int]]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a lone trailing sample breaks batch statistics at 1x1 bottlenecks
        chunks[-2].extend(chunks.pop())
    return chunks


def train_fold(model: NUNet, fold_data: FoldData, cfg: TrainConfig, fold: int = 0,
               log_path: str | Path | None = None) -> Checkpoint:
    """Train `model` on one split and return the final checkpoint.

    Runs epochs x batches of forward/loss/backward/step with per-epoch
    seeded shuffling. Aborts with epoch, batch, and loss in the message
    if the loss stops being finite.
    """
    if len(fold_data) == 0:
        raise ConfigError("training split is empty")
    device = torch.device(cfg.device)
    model.to(device).train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = random.Random(cfg.seed * 1_000_003 + fold)
    images = fold_data.images.to(device)
    targets = fold_data.targets.to(device)

    log_lines: list[str] = []
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    step = 0
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(fold_data)))
        rng.shuffle(order)
        epoch_sum = 0.0
        epoch_batches = 0
        for batch_no, batch in enumerate(_batches(order, cfg.batch_size), start=1):
            optimizer.zero_grad()
            probs = model(images[batch])
            loss = bce_loss(probs, targets[batch])
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch {batch_no} (fold {fold})"
                )
            loss.backward()
            optimizer.step()
            step += 1
            step_losses.append(value)
            epoch_sum += value
            epoch_batches += 1
            log_lines.append(f"epoch {epoch} step {step} loss {value:.6f}")
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        epoch_losses.append(epoch_sum / epoch_batches)
        if done:
            break
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("\n".join(log_lines) + "\n")

    model.eval()
    arch_text = model.cfg.to_text()
    return Checkpoint(
        state_dict={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        arch_config_text=arch_text,
        train_config=asdict(cfg),
        fold=fold,
        epoch=epoch,
        step_losses=step_losses,
        epoch_losses=epoch_losses,
        fingerprint=_fingerprint(model.cfg, cfg),
    )


def predict(model: NUNet, images: torch.Tensor, batch_size: int = 4,
            device: str = "cpu") -> torch.Tensor:
    """Probability maps for a stack of inputs (eval mode, no grad)."""
    model.to(device).eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(model(images[i:i + batch_size].to(device)).cpu())
    return torch.cat(outs) if outs else torch.empty(0)


def evaluate_split(model: NUNet, data: FoldData, fold: int | None = None,
                   threshold: float = 0.5, device: str = "cpu") -> list[MetricRecord]:
    """Per-image metric records for one split."""
    probs = predict(model, data.images, device=device)
    records = []
    for idx, sid in enumerate(data.ids):
        pred = binarize(probs[idx, 0].numpy(), threshold)
        gt = data.targets[idx, 0].numpy().astype(np.uint8)
        records.append(evaluate(pred, gt, id=sid, fold=fold))
    return records


def _resolve_arch(arch: NUNetConfig | str, cfg: TrainConfig) -> NUNetConfig:
    if isinstance(arch, str):
        return variant_config(arch, input_size=cfg.input_size, seed=cfg.seed)
    if arch.input_size != cfg.input_size:
        raise ConfigError(
            f"architecture input_size {arch.input_size} disagrees with "
            f"training input_size {cfg.input_size}"
        )
    return arch


def _run_one_fold(arch_text: str, manifest_text: str, plan_text: str, cfg: TrainConfig,
                  fold: int, out_dir: str | None) -> tuple[int, list[MetricRecord], str]:
    """Train and evaluate one fold (safe to run in a worker process)."""
    arch_cfg = NUNetConfig.from_text(arch_text)
    manifest = DatasetManifest.from_text(manifest_text)
    plan = FoldPlan.from_text(plan_text)
    divisor = arch_cfg.backbone.divisor

    model = build_nunet(replace(arch_cfg, seed=arch_cfg.seed + fold))
    train_data = load_split(manifest, plan.train_ids(fold), cfg.input_size, divisor)
    test_data = load_split(manifest, plan.test_ids(fold), cfg.input_size, divisor)

    overlap = set(train_data.ids) & set(test_data.ids)
    if overlap:
        raise TrainingError(f"fold {fold} leaks ids between splits: {sorted(overlap)[:5]}")

    ckpt_path = None
    log_path = None
    if out_dir is not None:
        fold_dir = Path(out_dir) / f"fold_{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = fold_dir / "checkpoint.pt"
        log_path = fold_dir / "train.log"

    checkpoint = train_fold(model, train_data, cfg, fold=fold, log_path=log_path)
    if ckpt_path is not None:
        checkpoint.save(ckpt_path)
    records = evaluate_split(model, test_data, fold=fold, device=cfg.device)
    return fold, records, checkpoint.fingerprint


def cross_validate(arch: NUNetConfig | str, manifest: DatasetManifest, fold_plan: FoldPlan,
                   cfg: TrainConfig, out_dir: str | Path | None = None,
                   method: str | None = None, jobs: int = 1) -> EvalReport:
    """k-fold cross-validation: train on k-1 folds, score the held-out fold.

    Persists per-fold checkpoints, training logs, and the merged report
    when `out_dir` is given. Folds can fan out to worker processes with
    `jobs` > 1; results merge deterministically by fold index.
    """
    arch_cfg = _resolve_arch(arch, cfg)
    if method is None:
        method = arch if isinstance(arch, str) else "custom"
    missing = [sid for sid in fold_plan.assignment if sid not in
               {s.id for s in manifest.samples}]
    if missing:
        raise ConfigError(f"fold plan references ids missing from manifest: {missing[:5]}")

    out_str = str(out_dir) if out_dir is not None else None
    args = [(arch_cfg.to_text(), manifest.to_text(), fold_plan.to_text(), cfg, fold, out_str)
            for fold in range(fold_plan.k)]
    if jobs > 1:
        import multiprocessing as mp
        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_run_one_fold, *zip(*args)))
    else:
        results = [_run_one_fold(*a) for a in args]
    results.sort(key=lambda r: r[0])

    records = [rec for _, recs, _ in results for rec in recs]
    report = EvalReport(
        method=method,
        records=records,
        config_fingerprint=_fingerprint(arch_cfg, cfg),
        fold_plan_fingerprint=fold_plan.fingerprint(),
        notes={"k": fold_plan.k, "epochs": cfg.epochs, "input_size": cfg.input_size,
               "class_filter": fold_plan.class_filter or "none"},
    )
    if out_dir is not None:
        report.save(out_dir)
    return report


def external_validate(checkpoints: list[Checkpoint | str | Path],
                      external_manifest: DatasetManifest, cfg: TrainConfig,
                      method: str | None = None,
                      out_dir: str | Path | None = None) -> EvalReport:
    """Score every checkpoint on an entire external corpus.

    Each checkpoint contributes one group of per-image records; the
    aggregate reports mean +- std across checkpoints. A checkpoint whose
    training input size differs from the evaluation size is accepted
    with a recorded warning as long as the divisor contract holds.
    """
    if not checkpoints:
        raise ConfigError("need at least one checkpoint")
    if len(external_manifest) == 0:
        raise ConfigError("external manifest is empty")
    loaded = [c if isinstance(c, Checkpoint) else Checkpoint.load(c) for c in checkpoints]

    warnings: list[str] = []
    records: list[MetricRecord] = []
    for group, ckpt in enumerate(loaded):
        arch_cfg = ckpt.arch_config
        divisor = arch_cfg.backbone.divisor
        if cfg.input_size % divisor != 0:
            raise ConfigError(
                f"evaluation input_size {cfg.input_size} violates the checkpoint's "
                f"divisor {divisor}"
            )
        trained_size = ckpt.train_config.get("input_size")
        if trained_size != cfg.input_size:
            msg = (f"checkpoint fold {ckpt.fold} was trained at {trained_size} "
                   f"but is evaluated at {cfg.input_size}")
            warnings.append(msg)
            log.warning("%s", msg)
        model = ckpt.build_model()
        data = load_split(external_manifest, [s.id for s in external_manifest.samples],
                          cfg.input_size, divisor)
        for rec in evaluate_split(model, data, fold=group, device=cfg.device):
            rec.id = f"ckpt{group}/{rec.id}"
            records.append(rec)

    report = EvalReport(
        method=method or f"external({loaded[0].fingerprint})",
        records=records,
        config_fingerprint=loaded[0].fingerprint,
        fold_plan_fingerprint="external",
        notes={"checkpoints": len(loaded), "n_external": len(external_manifest),
               "warnings": warnings},
    )
    if out_dir is not None:
        report.save(out_dir)
    return report
