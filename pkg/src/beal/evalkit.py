"""Dice evaluation, mask post-processing, ablation table and figure output."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .objectives import entropy_map
from .preprocess import crop_roi
from .synthdata import FundusSample, to_uint8

log = logging.getLogger(__name__)

CONFIG_TAGS = ("no_boundary", "baseline", "no_da", "bal", "eal", "beal", "upper_bound")


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not ((m == 0) | (m == 1)).all():
            raise ValueError(f"{name} is not a binary mask")
        m = m.astype(bool)
    return m


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    a = _as_binary(pred, "pred")
    b = _as_binary(gt, "gt")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask.astype(bool)
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def postprocess(mask_prob: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Threshold, keep the largest component, fill holes; then clip the cup to the disc.

    `mask_prob` is (2, H, W) with the disc in channel 0 and the cup in channel 1.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    prob = np.asarray(mask_prob)
    out = []
    for ch in range(2):
        m = prob[ch] > threshold
        m = ndimage.binary_fill_holes(largest_component(m))
        out.append(m)
    od, oc = out
    oc = largest_component(oc & od)
    return od.astype(np.uint8), oc.astype(np.uint8)


@dataclass
class EvalReport:
    di_cup: float
    di_disc: float
    per_sample: list[dict] = field(default_factory=list)
    config_tag: str = "beal"

    def to_dict(self) -> dict:
        return asdict(self)


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy()).to(dtype)


@torch.no_grad()
def predict(seg: torch.nn.Module, images: Sequence[np.ndarray], batch_size: int = 8):
    """Eval-mode forward over HxWx3 arrays; yields (boundary, mask_prob) numpy pairs."""
    seg.eval()
    dtype = next(seg.parameters()).dtype
    for i in range(0, len(images), batch_size):
        out = seg(images_to_tensor(images[i:i + batch_size], dtype))
        for j in range(out.mask_prob.shape[0]):
            b = None if out.boundary is None else out.boundary[j].numpy()
            yield b, out.mask_prob[j].numpy()


def evaluate(
    seg: torch.nn.Module,
    samples: Sequence[FundusSample],
    crop_size: int | None = None,
    threshold: float = 0.5,
    config_tag: str = "beal",
) -> EvalReport:
    """Mean disc and cup Dice of forward -> postprocess over labelled samples."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    prepared = []
    for s in samples:
        if not s.has_labels:
            raise ValueError(f"sample {s.sample_id!r} has no ground truth; evaluation needs labels")
        if crop_size is not None and s.image.shape[:2] != (crop_size, crop_size):
            s = crop_roi(s, crop_size)
        prepared.append(s)
    rows = []
    for s, (_, prob) in zip(prepared, predict(seg, [s.image for s in prepared])):
        od, oc = postprocess(prob, threshold)
        rows.append({"id": s.sample_id, "di_disc": dice(od, s.od_mask), "di_cup": dice(oc, s.oc_mask)})
    return EvalReport(
        di_cup=float(np.mean([r["di_cup"] for r in rows])),
        di_disc=float(np.mean([r["di_disc"] for r in rows])),
        per_sample=rows,
        config_tag=config_tag,
    )


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
    """Delimited summary table plus a JSON record file with per-sample rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{stem}.tsv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["config_tag", "di_cup", "di_disc", "n"])
        for r in reports:
            w.writerow([r.config_tag, f"{r.di_cup:.4f}", f"{r.di_disc:.4f}", len(r.per_sample)])
    records = out / f"{stem}.json"
    records.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    return table, records


def read_table(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


# --------------------------------------------------------------------------
# figures


def rescale_unit(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def contour(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def overlay_contours(image: np.ndarray, od: np.ndarray, oc: np.ndarray) -> np.ndarray:
    rgb = to_uint8(image).copy()
    rgb[contour(od)] = (0, 255, 0)
    rgb[contour(oc)] = (0, 0, 255)
    return rgb


def emit_visuals(sample: FundusSample, boundary, mask_prob, out_dir: str | Path,
                 threshold: float = 0.5) -> list[Path]:
    """Write ``{id}_contours.png``, ``{id}_entropy.png`` and ``{id}_boundary.png``.

    `mask_prob` is (2, H, W); `boundary` is (1, H, W) or None (a blank map is
    written for networks without a boundary branch).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create visual output directory {out}: {exc}") from exc
    prob = np.asarray(mask_prob, dtype=np.float64)
    od, oc = postprocess(prob, threshold)
    ent = entropy_map(torch.from_numpy(prob)).numpy()
    ent_img = np.concatenate([rescale_unit(ent[0]), rescale_unit(ent[1])], axis=1)
    b = np.zeros(prob.shape[1:]) if boundary is None else np.asarray(boundary)[0]

    name = sample.sample_id or "sample"
    paths = [out / f"{name}_contours.png", out / f"{name}_entropy.png", out / f"{name}_boundary.png"]
    Image.fromarray(overlay_contours(sample.image, od, oc)).save(paths[0])
    Image.fromarray(to_uint8(ent_img)).save(paths[1])
    Image.fromarray(to_uint8(np.clip(b, 0, 1))).save(paths[2])
    return paths


# --------------------------------------------------------------------------
# ablation


def ablation_overrides(tag: str) -> dict:
    """TrainConfig / SegNetConfig switches of one ablation row."""
    table = {
        "no_boundary": dict(use_boundary=False, use_bal=False, use_eal=False, lam=0.0),
        "baseline": dict(use_boundary=True, use_bal=False, use_eal=False, lam=0.0),
        "bal": dict(use_boundary=True, use_bal=True, use_eal=False),
        "eal": dict(use_boundary=True, use_bal=False, use_eal=True),
        "beal": dict(use_boundary=True, use_bal=True, use_eal=True),
        "upper_bound": dict(use_boundary=True, use_bal=False, use_eal=False, lam=0.0),
    }
    table["no_da"] = table["baseline"]
    if tag not in table:
        raise ValueError(f"unknown ablation tag {tag!r}; choose from {', '.join(CONFIG_TAGS)}")
    return table[tag]


def _train_row(experiment, tag: str, run_dir: Path, source, target, target_test) -> EvalReport:
    from .trainer import fit

    seg_cfg, train_cfg = experiment.variant(ablation_overrides(tag))
    discs = (experiment.boundary_disc, experiment.entropy_disc)
    log.info("ablation row %s -> %s", tag, run_dir)
    try:
        if tag == "upper_bound":
            state, _ = fit(target, None, train_cfg, seg_cfg, run_dir, disc_configs=discs)
        else:
            state, _ = fit(source, target, train_cfg, seg_cfg, run_dir, disc_configs=discs)
        report = evaluate(state.seg, target_test, train_cfg.crop_size, experiment.eval.threshold, tag)
    except Exception as exc:
        raise RuntimeError(f"ablation row {tag!r} failed: {exc}") from exc
    write_reports([report], run_dir, "eval")
    return report


def run_ablation(experiment, out_dir: str | Path, only: Sequence[str] | None = None,
                 workers: int = 1) -> list[EvalReport]:
    """Train and evaluate each ablation row; one subdirectory per row.

    ``no_da`` is the same training recipe as ``baseline`` and reuses its run.
    ``upper_bound`` trains supervised on the labelled target training split.
    With ``workers > 1`` rows train in separate processes; the table order and
    every row's result are unchanged because each run is seeded independently.
    """
    from .config import load_experiment_data

    tags = list(CONFIG_TAGS if not only else only)
    for t in tags:
        ablation_overrides(t)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out = Path(out_dir)
    data = load_experiment_data(experiment, out)

    # no_da and baseline share one training run
    to_train = []
    for t in tags:
        alias = {"no_da": "baseline", "baseline": "no_da"}.get(t)
        if alias not in to_train and t not in to_train:
            to_train.append(t)

    reports: dict[str, EvalReport] = {}
    if workers == 1:
        for tag in to_train:
            reports[tag] = _train_row(experiment, tag, out / tag, *data)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {tag: pool.submit(_train_row, experiment, tag, out / tag, *data) for tag in to_train}
            for tag, fut in futures.items():
                reports[tag] = fut.result()
    for t in tags:
        if t not in reports:
            src = reports["baseline" if t == "no_da" else "no_da"]
            reports[t] = replace(src, config_tag=t)
    ordered = [reports[t] for t in tags]
    write_reports(ordered, out, "ablation")
    return ordered
