"""Ablation sweeps over direction settings and cascade depth, plus PR export."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import time
from pathlib import Path

import torch
from torch import nn

from .bpm import Bpm, BpmConfig
from .config import RunConfig
from .data import load_split
from .encoder import PRESETS
from .metrics import MetricReport, write_pr_csv
from .model import DuplexNet
from .train import evaluate, model_from_checkpoint, predict, train

log = logging.getLogger(__name__)

# (rcam_mode, bpm_mode) rows of the direction-setting ablation, simplex rows first
DIRECTION_SETTINGS = [
    ("simplex-app-to-mo", "simplex-FtoG"),
    ("simplex-app-to-mo", "simplex-GtoF"),
    ("simplex-mo-to-app", "simplex-FtoG"),
    ("simplex-mo-to-app", "simplex-GtoF"),
    ("full-duplex", "self-purification"),
    ("full-duplex", "full-duplex"),
]

# per-unit increment implied by the reference (0.507M at N=2, 1.015M at N=4)
REFERENCE_UNIT_PARAMS = (1.015e6 - 0.507e6) / 2
UNIT_TOLERANCE = 0.25

CSV_COLUMNS = [
    "variant",
    "rcam_mode",
    "bpm_mode",
    "bpm_n",
    "params",
    "bpm_params",
    "flops",
    "runtime_s_per_frame",
    "mean_j",
    "mean_f",
    "mae",
    "f_beta_max",
    "e_max",
    "s_alpha",
]


def variant_name(rcam_mode: str, bpm_mode: str, bpm_n: int) -> str:
    return f"rcam={rcam_mode}_bpm={bpm_mode}_n={bpm_n}"


def count_flops(model: nn.Module, *inputs) -> int:
    """Analytic FLOPs of one forward pass: 2 x multiply-accumulates of every conv.

    Counted from layer shapes via forward hooks, per sample in the batch.
    """
    total = 0

    def hook(module, args, out):
        nonlocal total
        kh, kw = module.kernel_size
        macs_per_output = (module.in_channels // module.groups) * kh * kw
        total += 2 * macs_per_output * out[0].numel()

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, nn.Conv2d)]
    try:
        with torch.no_grad():
            model.eval()
            model(*inputs)
    finally:
        for h in handles:
            h.remove()
    return total


def model_flops(model: DuplexNet, size: int) -> int:
    x = torch.zeros(1, 3, size, size)
    return count_flops(model, x, x)


def bpm_unit_report(preset: str = "resnet50-like", direction: str = "full-duplex") -> dict:
    """Measured per-unit parameter increment against the reference implied value."""
    widths = list(PRESETS[preset])
    counts = [sum(p.numel() for p in Bpm(widths, widths, BpmConfig(n, direction)).parameters()) for n in range(5)]
    steps = {b - a for a, b in zip(counts, counts[1:])}
    increment = counts[1] - counts[0]
    deviation = increment / REFERENCE_UNIT_PARAMS - 1
    report = {
        "preset": preset,
        "direction": direction,
        "per_unit_params": increment,
        "affine": len(steps) == 1,
        "reference_per_unit_params": REFERENCE_UNIT_PARAMS,
        "relative_deviation": deviation,
        "within_tolerance": abs(deviation) <= UNIT_TOLERANCE,
    }
    if not report["within_tolerance"]:
        report["explanation"] = (
            "Every convolution inside a unit is 1x1 on 32-channel features, so a "
            "full-duplex unit holds 48 small convs (about 0.04M parameters). The "
            "reference gives neither the transfer-conv kernel size nor its width; "
            "the same unit with 3x3 kernels would hold about 0.35M. The unit is "
            "kept at 1x1 rather than tuned to match the reference count."
        )
    return report


def inference_runtime(model: DuplexNet, frames, flows, input_size: int, repeats: int = 1) -> float:
    """Wall-clock seconds per frame of :func:`predict` on the given tensors."""
    n = frames.shape[0]
    t0 = time.perf_counter()
    for _ in range(repeats):
        predict(model, frames, flows, input_size)
    return (time.perf_counter() - t0) / (repeats * n)


def sweep_variants(sweep: dict) -> list[tuple[str, str, int]]:
    """Expand {rcam_mode, bpm_mode, bpm_n} lists (or explicit "settings" pairs) to variants."""
    ns = sweep.get("bpm_n", [4])
    if "settings" in sweep:
        pairs = [tuple(p) for p in sweep["settings"]]
    else:
        pairs = list(itertools.product(sweep.get("rcam_mode", ["full-duplex"]), sweep.get("bpm_mode", ["full-duplex"])))
    return [(r, b, int(n)) for (r, b) in pairs for n in ns]


def ablate(base_config: RunConfig, sweep: dict, out_dir, split: str = "val", train_variants: bool = True) -> list[dict]:
    """Train and evaluate each variant from the same seed and corpus.

    Writes ``ablation.csv``, ``pr_curves.csv`` and ``ablation_report.json`` to
    ``out_dir`` and returns the CSV rows. With ``train_variants=False`` only the
    structural columns (params, FLOPs, runtime) are filled.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves = [], {}
    data = load_split(base_config.corpus, split) if train_variants else None
    for rcam_mode, bpm_mode, bpm_n in sweep_variants(sweep):
        name = variant_name(rcam_mode, bpm_mode, bpm_n)
        config = dataclasses.replace(
            base_config,
            rcam_mode=rcam_mode,
            bpm_mode=bpm_mode,
            bpm_n=bpm_n,
            output_dir=str(out / "runs" / name),
        )
        torch.manual_seed(config.seed)
        model = DuplexNet(config.net_config())
        row = {
            "variant": name,
            "rcam_mode": rcam_mode,
            "bpm_mode": bpm_mode,
            "bpm_n": bpm_n,
            "params": sum(p.numel() for p in model.parameters()),
            "bpm_params": sum(p.numel() for p in model.bpm.parameters()),
            "flops": model_flops(model, config.input_size),
        }
        if train_variants:
            log.info("training %s", name)
            ckpt = train(config)["joint"]
            report: MetricReport = evaluate(ckpt, split, out_dir=Path(config.output_dir) / f"eval_{split}", write_maps=False)
            trained, _ = model_from_checkpoint(ckpt)
            row["runtime_s_per_frame"] = inference_runtime(trained, data.frames, data.flows, config.input_size)
            row.update(report.summary())
            curves[name] = report.pr_curve
        else:
            x = torch.zeros(4, 3, base_config.input_size, base_config.input_size)
            row["runtime_s_per_frame"] = inference_runtime(model, x, x, config.input_size)
        rows.append(row)

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, restval="")
        writer.writeheader()
        writer.writerows(rows)
    if curves:
        export_pr(curves, out / "pr_curves.csv")
    report = {
        "bpm_unit": bpm_unit_report(),
        "monotone_in_n": monotone_in_n(rows),
        "ordering": metric_ordering(rows) if train_variants else {},
    }
    (out / "ablation_report.json").write_text(json.dumps(report, indent=2))
    return rows


def monotone_in_n(rows) -> dict:
    """For each direction setting, whether params and FLOPs are non-decreasing in N."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["rcam_mode"], r["bpm_mode"]), []).append(r)
    result = {}
    for key, group in groups.items():
        group = sorted(group, key=lambda r: r["bpm_n"])
        ok = all(a["params"] <= b["params"] and a["flops"] <= b["flops"] for a, b in zip(group, group[1:]))
        result["/".join(key)] = ok
    return result


def metric_ordering(rows, keys=("mean_j", "mean_f", "s_alpha")) -> dict:
    """Variant names sorted best-first per metric (lower is better for MAE)."""
    order = {k: [r["variant"] for r in sorted(rows, key=lambda r: -r[k])] for k in keys}
    order["mae"] = [r["variant"] for r in sorted(rows, key=lambda r: r["mae"])]
    return order


def export_pr(reports, path) -> None:
    """Write one labeled 256-row PR series per variant.

    ``reports`` maps a variant label to a MetricReport, a report.json path, or a
    raw (256, 2) curve.
    """
    curves = {}
    for label, rep in reports.items():
        if isinstance(rep, (str, Path)):
            rep = MetricReport.read_json(rep)
        curves[label] = rep.pr_curve if isinstance(rep, MetricReport) else rep
    write_pr_csv(curves, path)
