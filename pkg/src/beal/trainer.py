"""Alternating optimization of the segmentation network and both discriminators."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .adversary import DiscConfig, PatchDiscriminator, init_disc
from .evalkit import evaluate
from .objectives import (
    LossReport,
    adversarial_objective,
    boundary_loss,
    discriminator_objective,
    entropy_map,
    mask_loss,
    total_seg_objective,
)
from .preprocess import AugmentPolicy, augment, crop_roi, default_sigma, make_boundary_target
from .segnet import SegNet, SegNetConfig, init_params
from .synthdata import FundusSample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "beal-trainstate-1"


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    seg_lr: float = 1e-3
    seg_lr_decay: float = 0.2
    lr_step_epochs: int = 100
    disc_lr: float = 2.5e-5
    disc_momentum: float = 0.0
    seg_optimizer: str = "adam"
    disc_optimizer: str = "sgd"
    lam: float = 0.01
    use_bal: bool = True
    use_eal: bool = True
    entropy_complementary: bool = False
    seed: int = 0
    crop_size: int = 128
    boundary_sigma: float | None = None
    checkpoint_every: int = 0
    eval_threshold: float = 0.5
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    augment_target: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("seg_lr", "disc_lr", "seg_lr_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.lr_step_epochs < 1:
            raise ValueError("lr_step_epochs must be >= 1")
        if self.seg_optimizer not in ("adam", "sgd") or self.disc_optimizer not in ("adam", "sgd"):
            raise ValueError("optimizers must be 'adam' or 'sgd'")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        self.augment.validate()

    @property
    def sigma(self) -> float:
        return self.boundary_sigma if self.boundary_sigma is not None else default_sigma(self.crop_size)

    @classmethod
    def tiny(cls, **kw) -> "TrainConfig":
        return cls(**{"batch_size": 4, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """Step decay of the segmentation rate every `lr_step_epochs`; constant discriminator rate."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.seg_lr * config.seg_lr_decay ** (epoch // config.lr_step_epochs), config.disc_lr


# --------------------------------------------------------------------------
# data


class DomainSplit:
    """ROI-cropped samples of one domain with counted label access.

    Images and disc centres are free to read; masks and boundary targets go
    through :meth:`labels`, which increments :attr:`label_reads`.
    """

    def __init__(self, samples: Sequence[FundusSample], crop_size: int, sigma: float, name: str = ""):
        if not samples:
            raise ValueError(f"{name or 'dataset'} split is empty")
        self.name = name
        self.crop_size = crop_size
        self.sigma = sigma
        self._samples = list(samples)
        self._images: dict[int, FundusSample] = {}
        self._labels: dict[int, tuple] = {}
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self._samples)

    def image(self, i: int) -> FundusSample:
        """Image-only view (masks stripped) of sample `i`, cropped to the ROI."""
        if i not in self._images:
            s = self._samples[i]
            bare = FundusSample(s.image, None, None, s.disc_center, s.domain, s.sample_id)
            if bare.image.shape[:2] != (self.crop_size, self.crop_size):
                bare = crop_roi(bare, self.crop_size)
            self._images[i] = bare
        return self._images[i]

    def labels(self, i: int):
        """(od_mask, oc_mask, BoundaryTarget) of sample `i`, cropped like the image."""
        self.label_reads += 1
        if i not in self._labels:
            s = self._samples[i]
            if not s.has_labels:
                raise ValueError(f"sample {s.sample_id!r} in split {self.name!r} has no labels")
            if s.image.shape[:2] != (self.crop_size, self.crop_size):
                s = crop_roi(s, self.crop_size)
            self._labels[i] = (s.od_mask, s.oc_mask, make_boundary_target(s.od_mask, s.oc_mask, self.sigma))
        return self._labels[i]


def _to_tensor(arrays, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays))).to(dtype)


def make_batch(split: DomainSplit, indices: Sequence[int], policy: AugmentPolicy | None,
               seeds: Sequence[int], with_labels: bool, dtype=torch.float32) -> dict:
    images, ods, ocs, bounds = [], [], [], []
    for i, seed in zip(indices, seeds):
        s = split.image(i)
        bt = None
        if with_labels:
            od, oc, bt = split.labels(i)
            s = replace(s, od_mask=od, oc_mask=oc)
        if policy is not None:
            s, bt = augment(s, bt, policy, seed)
        images.append(s.image.transpose(2, 0, 1))
        if with_labels:
            ods.append(s.od_mask)
            ocs.append(s.oc_mask)
            bounds.append(bt.map[None])
    batch = {"image": _to_tensor(images, dtype)}
    if with_labels:
        batch["od"] = _to_tensor(ods, dtype)
        batch["oc"] = _to_tensor(ocs, dtype)
        batch["boundary"] = _to_tensor(bounds, dtype)
    return batch


def _epoch_order(n: int, n_needed: int, seed: int, epoch: int, domain: int) -> list[int]:
    """Shuffled indices for one epoch, reshuffled each time the split runs out."""
    order: list[int] = []
    cycle = 0
    while len(order) < n_needed:
        rng = np.random.default_rng([seed, epoch, domain, cycle])
        order.extend(rng.permutation(n).tolist())
        cycle += 1
    return order[:n_needed]


def _aug_seeds(seed: int, epoch: int, it: int, domain: int, count: int) -> list[int]:
    return np.random.SeedSequence([seed, epoch, it, domain]).generate_state(count).tolist()


def epoch_batches(source: DomainSplit, target: DomainSplit | None, config: TrainConfig, epoch: int):
    """Zip one source and one target batch per iteration.

    Every batch holds exactly ``batch_size`` samples; a split that runs out
    restarts with a fresh shuffle.
    """
    b = config.batch_size
    n_iter = math.ceil(len(source) / b)
    if target is not None:
        n_iter = max(n_iter, math.ceil(len(target) / b))
    s_order = _epoch_order(len(source), n_iter * b, config.seed, epoch, 0)
    t_order = _epoch_order(len(target), n_iter * b, config.seed, epoch, 1) if target is not None else None
    for it in range(n_iter):
        s_idx = s_order[it * b:(it + 1) * b]
        src = make_batch(source, s_idx, config.augment, _aug_seeds(config.seed, epoch, it, 0, len(s_idx)), True)
        tgt = None
        if target is not None:
            t_idx = t_order[it * b:(it + 1) * b]
            policy = config.augment if config.augment_target else None
            tgt = make_batch(target, t_idx, policy, _aug_seeds(config.seed, epoch, it, 1, len(t_idx)), False)
        yield src, tgt


# --------------------------------------------------------------------------
# state


def _make_optimizer(kind: str, params, lr: float, momentum: float = 0.0):
    params = list(params)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.99))
    return torch.optim.SGD(params, lr=lr, momentum=momentum)


@dataclass
class TrainState:
    seg: SegNet
    db: PatchDiscriminator | None
    de: PatchDiscriminator | None
    seg_opt: torch.optim.Optimizer
    db_opt: torch.optim.Optimizer | None
    de_opt: torch.optim.Optimizer | None
    seg_config: SegNetConfig
    train_config: TrainConfig
    epoch: int = 0  # next epoch to run
    iteration: int = 0
    audit: dict = field(default_factory=dict)

    @property
    def uses_target(self) -> bool:
        return self.db is not None or self.de is not None

    def set_lrs(self, seg_lr: float, disc_lr: float) -> None:
        for g in self.seg_opt.param_groups:
            g["lr"] = seg_lr
        for opt in (self.db_opt, self.de_opt):
            if opt is not None:
                for g in opt.param_groups:
                    g["lr"] = disc_lr

    def to(self, dtype) -> "TrainState":
        for m in (self.seg, self.db, self.de):
            if m is not None:
                m.to(dtype)
        return self


def init_state(seg_config: SegNetConfig, config: TrainConfig, dtype=torch.float32,
               db_config: DiscConfig | None = None, de_config: DiscConfig | None = None) -> TrainState:
    """Fresh networks and optimizers; discriminators only for active adversarial paths."""
    seg = init_params(seg_config, config.seed).to(dtype)
    tiny = seg_config.tiny_mode
    db = de = None
    if config.use_bal and seg_config.use_boundary:
        db = init_disc(db_config or DiscConfig.boundary(tiny), config.seed + 1).to(dtype)
    if config.use_eal:
        de = init_disc(de_config or DiscConfig.entropy(tiny), config.seed + 2).to(dtype)
    seg_lr, disc_lr = lr_schedule(0, config)
    seg_opt = _make_optimizer(config.seg_optimizer, seg.parameters(), seg_lr)
    db_opt = _make_optimizer(config.disc_optimizer, db.parameters(), disc_lr, config.disc_momentum) if db else None
    de_opt = _make_optimizer(config.disc_optimizer, de.parameters(), disc_lr, config.disc_momentum) if de else None
    return TrainState(seg, db, de, seg_opt, db_opt, de_opt, seg_config, config)


def _max_abs_grad(module: nn.Module | None) -> float:
    if module is None:
        return 0.0
    grads = [p.grad.abs().max().item() for p in module.parameters() if p.grad is not None]
    return max(grads, default=0.0)


def _zero(*modules) -> None:
    for m in modules:
        if m is not None:
            m.zero_grad(set_to_none=True)


def _finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise FloatingPointError(f"non-finite loss term {name} = {value.item()}")


def seg_objective(state: TrainState, source_batch: dict, target_batch: dict | None):
    """Forward both domains and build the segmentation objective (discriminators frozen).

    Returns (total, parts, maps) where maps holds the boundary and entropy maps
    of both domains for the discriminator phases.
    """
    cfg = state.train_config
    out_s = state.seg(source_batch["image"])
    l_mask = mask_loss(out_s.mask_prob, source_batch["od"], source_batch["oc"])
    zero = l_mask.new_zeros(())
    l_bound = boundary_loss(out_s.boundary, source_batch["boundary"]) if out_s.boundary is not None else zero
    l_adv_b = l_adv_e = zero
    maps = {"src_b": out_s.boundary,
            "src_e": entropy_map(out_s.mask_prob, complementary=cfg.entropy_complementary)}
    if state.uses_target:
        if target_batch is None:
            raise ValueError("adversarial training needs a target batch")
        out_t = state.seg(target_batch["image"])
        maps["tgt_b"] = out_t.boundary
        maps["tgt_e"] = entropy_map(out_t.mask_prob, complementary=cfg.entropy_complementary)
        if state.db is not None:
            l_adv_b = adversarial_objective(maps["tgt_b"], state.db)
        if state.de is not None:
            l_adv_e = adversarial_objective(maps["tgt_e"], state.de)
    total = total_seg_objective(l_mask, l_bound, l_adv_b, l_adv_e, cfg.lam)
    parts = {"l_mask": l_mask, "l_boundary": l_bound, "l_adv_b": l_adv_b, "l_adv_e": l_adv_e}
    return total, parts, maps


def train_step(source_batch: dict, target_batch: dict | None, state: TrainState,
               hook: Callable[[str], None] | None = None) -> tuple[TrainState, LossReport]:
    """(a) segmentation update, (b) boundary discriminator update, (c) entropy discriminator update.

    ``state.audit`` afterwards holds the largest gradient that leaked across
    the isolation boundary in each phase (zero when isolation holds) and the
    order in which the phases ran.
    """
    seg, db, de = state.seg, state.db, state.de
    order: list[str] = []
    audit: dict = {}
    seg.train()

    # (a)
    _zero(seg, db, de)
    total, parts, maps = seg_objective(state, source_batch, target_batch)
    for name, value in parts.items():
        _finite(name, value)
    _finite("total_seg", total)
    total.backward()
    audit["disc_grad_in_seg_phase"] = max(_max_abs_grad(db), _max_abs_grad(de))
    state.seg_opt.step()
    order.append("seg")
    if hook:
        hook("seg")

    l_db = l_de = 0.0
    # (b)
    if db is not None:
        _zero(seg, db, de)
        loss = discriminator_objective(maps["src_b"], maps["tgt_b"], db)
        _finite("l_db", loss)
        loss.backward()
        audit["seg_grad_in_db_phase"] = _max_abs_grad(seg)
        state.db_opt.step()
        l_db = loss.item()
        order.append("db")
        if hook:
            hook("db")
    # (c)
    if de is not None:
        _zero(seg, db, de)
        loss = discriminator_objective(maps["src_e"], maps["tgt_e"], de)
        _finite("l_de", loss)
        loss.backward()
        audit["seg_grad_in_de_phase"] = _max_abs_grad(seg)
        state.de_opt.step()
        l_de = loss.item()
        order.append("de")
        if hook:
            hook("de")

    audit["order"] = order
    state.audit = audit
    state.iteration += 1
    report = LossReport(
        l_mask=parts["l_mask"].item(),
        l_boundary=parts["l_boundary"].item(),
        l_adv_b=parts["l_adv_b"].item(),
        l_adv_e=parts["l_adv_e"].item(),
        l_db=l_db,
        l_de=l_de,
        total_seg=total.item(),
    )
    report.check_finite()
    return state, report


# --------------------------------------------------------------------------
# checkpoints


def _state_dict_or_none(m):
    return None if m is None else m.state_dict()


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Atomically write every parameter set, optimizer state, config and RNG state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seg_sd = state.seg.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "seg_config": state.seg_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "db_config": None if state.db is None else state.db.config.to_dict(),
        "de_config": None if state.de is None else state.de.config.to_dict(),
        "seg": seg_sd,
        "db": _state_dict_or_none(state.db),
        "de": _state_dict_or_none(state.de),
        "shapes": {k: list(v.shape) for k, v in seg_sd.items()},
        "seg_opt": state.seg_opt.state_dict(),
        "db_opt": _state_dict_or_none(state.db_opt),
        "de_opt": _state_dict_or_none(state.de_opt),
        "epoch": state.epoch,
        "iteration": state.iteration,
        "torch_rng": torch.get_rng_state(),
        "dtype": str(next(state.seg.parameters()).dtype),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def _load_payload(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a training checkpoint (format {payload.get('format')!r})")
    return payload


def load_segnet(path: str | Path) -> SegNet:
    """Segmentation network of a checkpoint, shapes validated against its recorded config."""
    payload = _load_payload(path)
    cfg = SegNetConfig(**payload["seg_config"])
    net = SegNet(cfg)
    expected = {k: list(v.shape) for k, v in net.state_dict().items()}
    if expected != payload["shapes"]:
        bad = sorted(k for k in set(expected) | set(payload["shapes"]) if expected.get(k) != payload["shapes"].get(k))
        raise ValueError(f"checkpoint {path} does not match its SegNetConfig at: {', '.join(bad[:5])}")
    net.load_state_dict(payload["seg"])
    dtype = getattr(torch, payload.get("dtype", "torch.float32").split(".")[-1])
    return net.to(dtype)


def load_checkpoint(path: str | Path) -> TrainState:
    payload = _load_payload(path)
    seg_cfg = SegNetConfig(**payload["seg_config"])
    train_cfg = TrainConfig(**payload["train_config"])
    dtype = getattr(torch, payload.get("dtype", "torch.float32").split(".")[-1])
    disc_cfgs = [DiscConfig(**payload[k]) if payload[k] else None for k in ("db_config", "de_config")]
    state = init_state(seg_cfg, train_cfg, dtype, *disc_cfgs)
    state.seg.load_state_dict(payload["seg"])
    state.seg_opt.load_state_dict(payload["seg_opt"])
    for name in ("db", "de"):
        module, opt = getattr(state, name), getattr(state, name + "_opt")
        if (module is None) != (payload[name] is None):
            raise ValueError(f"checkpoint {path}: discriminator {name} presence disagrees with its config")
        if module is not None:
            module.load_state_dict(payload[name])
            opt.load_state_dict(payload[name + "_opt"])
    state.epoch = payload["epoch"]
    state.iteration = payload["iteration"]
    torch.set_rng_state(payload["torch_rng"])
    return state


# --------------------------------------------------------------------------
# fit


def _truncate_log(path: Path, start_epoch: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["epoch"] < start_epoch]
    path.write_text("".join(line + "\n" for line in kept))


def fit(
    source: Sequence[FundusSample],
    target: Sequence[FundusSample] | None,
    config: TrainConfig,
    seg_config: SegNetConfig | None = None,
    out_dir: str | Path | None = None,
    eval_samples: Sequence[FundusSample] | None = None,
    resume: str | Path | None = None,
    dtype=torch.float32,
    target_split: DomainSplit | None = None,
    disc_configs: tuple[DiscConfig | None, DiscConfig | None] = (None, None),
) -> tuple[TrainState, list[dict]]:
    """Train from scratch (or resume) for ``config.epochs`` epochs.

    Writes ``metrics.jsonl`` and checkpoints under `out_dir` when given. Target
    masks are never read; the target split's label counter is checked at the end.
    """
    seg_config = seg_config or SegNetConfig(crop_size=config.crop_size)
    if seg_config.crop_size != config.crop_size:
        seg_config = replace(seg_config, crop_size=config.crop_size)
    torch.manual_seed(config.seed)
    if resume is not None:
        state = load_checkpoint(resume)
        state.train_config = replace(state.train_config, epochs=config.epochs)
        config = state.train_config
    else:
        state = init_state(seg_config, config, dtype, *disc_configs)

    source_split = DomainSplit(source, config.crop_size, config.sigma, "source")
    if target_split is None and target is not None:
        target_split = DomainSplit(target, config.crop_size, config.sigma, "target")
    if state.uses_target and target_split is None:
        raise ValueError("adversarial paths are enabled but no target dataset was given")

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        if resume is None and log_path.exists():
            log_path.unlink()
        _truncate_log(log_path, state.epoch)

    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    active_target = target_split if state.uses_target else None
    for epoch in range(state.epoch, config.epochs):
        seg_lr, disc_lr = lr_schedule(epoch, config)
        state.set_lrs(seg_lr, disc_lr)
        for src, tgt in epoch_batches(source_split, active_target, config, epoch):
            if dtype != torch.float32:
                src = {k: v.to(dtype) for k, v in src.items()}
                tgt = None if tgt is None else {k: v.to(dtype) for k, v in tgt.items()}
            state, report = train_step(src, tgt, state)
            emit({"kind": "iter", "iteration": state.iteration, "epoch": epoch, **report.to_dict(),
                  "seg_lr": seg_lr})
        state.epoch = epoch + 1
        if eval_samples:
            rep = evaluate(state.seg, eval_samples, config.crop_size, config.eval_threshold)
            emit({"kind": "eval", "epoch": epoch, "iteration": state.iteration,
                  "di_cup": rep.di_cup, "di_disc": rep.di_disc})
        if out is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
            save_checkpoint(state, out / "checkpoints" / f"epoch_{state.epoch:04d}.pt")
        log.debug("epoch %d done (iteration %d)", epoch, state.iteration)

    if out is not None:
        save_checkpoint(state, out / "checkpoints" / "last.pt")
    if target_split is not None and target_split.label_reads:
        raise AssertionError(f"target labels were read {target_split.label_reads} times during fit")
    return state, records
