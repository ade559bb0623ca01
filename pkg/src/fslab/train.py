"""Three-stage training schedule, checkpointing and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from .config import STAGES, RunConfig
from .data import SplitTensors, load_split, resize_batch
from .datamodel import PredictionPair, write_mask
from .decoder import bce_loss, total_loss
from .metrics import MetricReport, aggregate, frame_metrics, write_pr_csv
from .model import DuplexNet

log = logging.getLogger(__name__)

STAGE_SPLITS = {
    "spatial-pretrain": "pretrain-spatial",
    "temporal-pretrain": "pretrain-temporal",
    "joint": "train",
}


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def set_determinism() -> None:
    torch.use_deterministic_algorithms(True)
    torch.backends.cudnn.benchmark = False


def _epoch_seed(seed: int, stage: str, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage), epoch]).generate_state(1)[0])


def state_hash(state_dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(state_dict[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(config: RunConfig) -> DuplexNet:
    torch.manual_seed(config.seed)
    return DuplexNet(config.net_config())


def stage_loss(model: DuplexNet, stage: str, frames, flows, masks, reduction: str):
    if stage == "spatial-pretrain":
        return bce_loss(model.forward_appearance(frames), masks, reduction)
    if stage == "temporal-pretrain":
        return bce_loss(model.forward_motion(flows), masks, reduction)
    return total_loss(model(frames, flows), masks, reduction)


def _make_optimizer(config: RunConfig, model: DuplexNet, stage: str):
    opt_cfg = config.optimizer
    optimizer = torch.optim.SGD(
        model.stage_parameters(stage),
        lr=opt_cfg.lr,
        momentum=opt_cfg.momentum,
        weight_decay=opt_cfg.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=opt_cfg.lr_decay_every_epochs, gamma=1 - opt_cfg.lr_decay_factor
    )
    return optimizer, scheduler


def save_checkpoint(path, model, optimizer, scheduler, config: RunConfig, stage: str, epoch: int, losses) -> None:
    state = model.state_dict()
    torch.save(
        {
            "model": state,
            "model_hash": state_hash(state),
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "stage": stage,
            "epoch": epoch,
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "epoch_losses": list(losses),
        },
        path,
    )


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def train_epoch(model, optimizer, data: SplitTensors, config: RunConfig, stage: str, epoch: int, step_log=None) -> float:
    gen = torch.Generator().manual_seed(_epoch_seed(config.seed, stage, epoch))
    order = torch.randperm(len(data), generator=gen)
    sizes = config.scaled_sizes()
    model.train()
    losses = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        size = sizes[int(torch.randint(len(sizes), (1,), generator=gen))]
        frames, flows, masks = resize_batch(data.frames[idx], data.flows[idx], data.masks[idx], size)
        loss = stage_loss(model, stage, frames, flows, masks, config.loss_reduction)
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite loss {loss.item()} in stage {stage}, epoch {epoch}, step {start // config.batch_size}"
            )
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
        if step_log is not None:
            step_log({"stage": stage, "epoch": epoch, "step": start // config.batch_size, "size": size, "loss": loss.item()})
    return float(np.mean(losses))


def train(config: RunConfig, resume=None) -> dict:
    """Run the spatial, temporal and joint stages; returns {stage: final checkpoint path}."""
    set_determinism()
    out = Path(config.output_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    model = build_model(config)

    first_stage, first_epoch, resume_ckpt = 0, 0, None
    if resume is not None:
        resume_ckpt = load_checkpoint(resume)
        if resume_ckpt["config_hash"] != config.hash():
            raise CheckpointError("checkpoint was written with a different config")
        model.load_state_dict(resume_ckpt["model"])
        first_stage = STAGES.index(resume_ckpt["stage"])
        first_epoch = resume_ckpt["epoch"] + 1

    log_path = out / "train_log.jsonl"
    mode = "a" if resume is not None else "w"
    final = {}
    with open(log_path, mode) as log_file:

        def step_log(record):
            log_file.write(json.dumps(record) + "\n")

        for si, stage in enumerate(STAGES):
            n_epochs = config.epochs.for_stage(stage)
            stage_ckpt = ckpt_dir / f"{stage}.pt"
            if si < first_stage:
                if stage_ckpt.exists():
                    final[stage] = stage_ckpt
                continue
            if n_epochs == 0:
                continue
            resuming = resume_ckpt is not None and si == first_stage
            if stage == "joint" and not resuming:
                _load_pretrained(model, final)
            data = load_split(config.corpus, STAGE_SPLITS[stage])
            optimizer, scheduler = _make_optimizer(config, model, stage)
            start, epoch_losses = 0, []
            if resuming:
                optimizer.load_state_dict(resume_ckpt["optimizer"])
                scheduler.load_state_dict(resume_ckpt["scheduler"])
                start, epoch_losses = first_epoch, list(resume_ckpt["epoch_losses"])
            for epoch in range(start, n_epochs):
                t0 = time.perf_counter()
                mean_loss = train_epoch(model, optimizer, data, config, stage, epoch, step_log)
                scheduler.step()
                epoch_losses.append(mean_loss)
                log.info("%s epoch %d/%d loss %.4f (%.1fs)", stage, epoch + 1, n_epochs, mean_loss, time.perf_counter() - t0)
                save_checkpoint(ckpt_dir / f"{stage}_epoch{epoch:03d}.pt", model, optimizer, scheduler, config, stage, epoch, epoch_losses)
            save_checkpoint(stage_ckpt, model, optimizer, scheduler, config, stage, n_epochs - 1, epoch_losses)
            final[stage] = stage_ckpt
    return final


def _load_pretrained(model: DuplexNet, finished: dict) -> None:
    """Copy each pretraining stage's parameter group from its checkpoint."""
    for stage in ("spatial-pretrain", "temporal-pretrain"):
        if stage not in finished:
            continue
        prefixes = DuplexNet.STAGE_PREFIXES[stage]
        state = load_checkpoint(finished[stage])["model"]
        subset = {k: v for k, v in state.items() if k.startswith(prefixes)}
        model.load_state_dict(subset, strict=False)


@torch.no_grad()
def predict(model: DuplexNet, frames, flows, input_size: int, head: str = "SA", batch_size: int = 8):
    """Maps at the input resolution of ``frames``; the network itself runs at ``input_size``."""
    model.eval()
    out_size = frames.shape[-2:]
    maps = []
    for start in range(0, frames.shape[0], batch_size):
        fr, fl, _ = resize_batch(frames[start : start + batch_size], flows[start : start + batch_size], frames[start : start + batch_size, :1], input_size)
        pred: PredictionPair = model(fr, fl)
        s = pred.select(head)
        if tuple(s.shape[-2:]) != tuple(out_size):
            s = torch.nn.functional.interpolate(s, size=tuple(out_size), mode="bilinear", align_corners=False)
        maps.append(s.clamp(0, 1))
    return torch.cat(maps)[:, 0].numpy().astype(np.float64)


def model_from_checkpoint(ckpt) -> tuple[DuplexNet, RunConfig]:
    if not isinstance(ckpt, dict):
        ckpt = load_checkpoint(ckpt)
    config = RunConfig.from_dict(ckpt["config"])
    model = DuplexNet(config.net_config())
    try:
        model.load_state_dict(ckpt["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    return model, config


def evaluate(checkpoint, split: str = "val", corpus=None, out_dir=None, head: str | None = None, write_maps: bool = True) -> MetricReport:
    """Score S (S_A by default) on every usable frame of ``split``.

    J and F use maps binarized at 0.5; V-SOD metrics use the real-valued maps.
    """
    model, config = model_from_checkpoint(checkpoint)
    head = head or config.prediction_head
    data = load_split(corpus or config.corpus, split)
    maps = predict(model, data.frames, data.flows, config.input_size, head)
    gts = data.masks[:, 0].numpy()
    if maps.shape != gts.shape:
        raise CheckpointError(f"prediction shape {maps.shape} does not match ground truth {gts.shape}")
    frames = [frame_metrics(s, g, cid, t) for s, g, cid, t in zip(maps, gts, data.clip_ids, data.frame_ids)]
    report = aggregate(frames)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "report.json")
        write_pr_csv(report.pr_curve, out / "pr_curve.csv")
        if write_maps:
            for s, cid, t in zip(maps, data.clip_ids, data.frame_ids):
                (out / "masks" / cid).mkdir(parents=True, exist_ok=True)
                (out / "maps" / cid).mkdir(parents=True, exist_ok=True)
                write_mask(s, out / "masks" / cid / f"{t:05d}.png", threshold=0.5)
                write_mask(s, out / "maps" / cid / f"{t:05d}.png", threshold=None)
    return report


def loss_history(checkpoint) -> list:
    ckpt = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    return list(ckpt["epoch_losses"])


def is_finite(values) -> bool:
    return all(math.isfinite(v) for v in values)
