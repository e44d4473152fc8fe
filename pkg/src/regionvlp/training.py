"""Learning-rate schedule, Adam, the training loop and checkpoint files.

Checkpoint directory layout::

    config.json    model configuration
    params.json    ordered list of {name, shape, dtype="f32"}
    params.bin     float32-LE tensors concatenated in params.json order
    optim.json     optional: step, hyperparameters, tensor list
    optim.bin      optional: first then second moments, same order as params
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch

from .alignment import LOSS_TERMS, batch_loss
from .dataset_io import Dataset, make_batch
from .datamodel import ModelConfig
from .encoders import RegionVLP

log = logging.getLogger(__name__)


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    decay_epochs: tuple[int, ...]
    decay_factor: float
    total_epochs: int

    def __post_init__(self):
        epochs = tuple(int(e) for e in self.decay_epochs)
        object.__setattr__(self, "decay_epochs", epochs)
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if epochs and (epochs[0] < 0 or epochs[-1] >= self.total_epochs):
            raise ValueError("decay_epochs must lie in [0, total_epochs)")
        if not self.base_lr > 0 or not self.decay_factor > 0:
            raise ValueError("base_lr and decay_factor must be positive")


PRETRAIN_SCHEDULE = Schedule(1e-5, (30, 40), 0.1, 50)
FINETUNE_SCHEDULE = Schedule(1e-5, (2, 4, 8), 0.1, 10)


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    """base_lr times decay_factor per decay epoch already reached.

    Computed in decimal so decade decays give exactly 1e-6, 1e-7, ...
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    k = sum(1 for e in schedule.decay_epochs if e <= epoch)
    lr = Decimal(repr(schedule.base_lr)) * Decimal(repr(schedule.decay_factor)) ** k
    return float(lr)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if not lr > 0:
        raise ValueError("lr must be > 0")
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    model: RegionVLP
    optim: OptimState
    log: list[dict]


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def fit(
    dataset: Dataset,
    config: ModelConfig,
    schedule: Schedule,
    seed: int = 0,
    batch_size: int = 16,
    num_frames: int = 1,
    frame_mode: str = "random",
    selection: str = "sorted",
    iou_threshold: float = 0.5,
    model: RegionVLP | None = None,
    optim: OptimState | None = None,
    on_epoch=None,
) -> FitResult:
    """Train on ``dataset`` for ``schedule.total_epochs`` epochs.

    Shuffling and frame sampling are pure functions of (seed, epoch), so two
    calls with the same arguments give bitwise-identical logs. A trailing
    batch with fewer than two pairs is dropped.
    """
    if len(dataset) < 2 or batch_size < 2:
        raise ValueError("dataset smaller than one contrastive batch")
    if dataset.dim != config.d:
        raise ValueError(f"dataset dim {dataset.dim} != model d {config.d}")
    model = model if model is not None else RegionVLP(config, seed=seed)
    optim = optim if optim is not None else OptimState()
    params = dict(model.named_parameters())
    captions = [dataset.caption(k, config.max_words) for k in range(len(dataset))]
    history = []

    for epoch in range(schedule.total_epochs):
        lr = lr_at_epoch(schedule, epoch)
        order = np.random.default_rng(_derived_seed(seed, epoch)).permutation(len(dataset))
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        batches = 0
        model.train()
        for start in range(0, len(order), batch_size):
            keys = [int(k) for k in order[start : start + batch_size]]
            if len(keys) < 2:
                continue
            pairs = [
                (
                    dataset.video(
                        k, num_frames, frame_mode, _derived_seed(seed, epoch, k),
                        config.object_num, selection, iou_threshold,
                    ),
                    captions[k],
                )
                for k in keys
            ]
            batch = make_batch(pairs, config.max_frames)
            r, t = model(batch)
            loss, terms = batch_loss(
                r, t, batch.region_mask, batch.word_mask, config.sigma,
                use_refinement=config.use_refinement,
                use_local_losses=config.use_local_losses,
            )
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(params, {n: p.grad for n, p in params.items()}, optim, lr)
            for name in LOSS_TERMS:
                sums[name] += float(terms[name].detach())
            batches += 1
        row = {"epoch": epoch, "lr": lr}
        row.update({name: sums[name] / batches for name in LOSS_TERMS})
        row["total"] = sum(row[name] for name in LOSS_TERMS)
        history.append(row)
        log.debug("epoch %d lr %.3g total %.4f", epoch, lr, row["total"])
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return FitResult(model, optim, history)


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_table(tensors: dict[str, torch.Tensor]) -> tuple[list[dict], bytes]:
    entries, chunks = [], []
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32"})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return entries, b"".join(chunks)


def _read_table(entries: list[dict], blob: bytes, where: str) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for e in entries:
        if e.get("dtype") != "f32":
            raise CheckpointError(f"{where}: unsupported dtype {e.get('dtype')!r} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"{where}: truncated at {e['name']}")
        out[e["name"]] = np.frombuffer(blob, "<f4", count, offset).reshape(e["shape"]).copy()
        offset += 4 * count
    if offset != len(blob):
        raise CheckpointError(f"{where}: {len(blob) - offset} trailing bytes")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def save_checkpoint(model: RegionVLP, path, optim: OptimState | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "config.json", model.config.to_dict())
    params = dict(model.state_dict())
    entries, blob = _tensor_table(params)
    _write_json(root / "params.json", entries)
    (root / "params.bin").write_bytes(blob)
    if optim is not None:
        moments = {f"m.{n}": optim.m.get(n, torch.zeros_like(p)) for n, p in params.items()}
        moments.update({f"v.{n}": optim.v.get(n, torch.zeros_like(p)) for n, p in params.items()})
        entries, blob = _tensor_table(moments)
        meta = {
            "step": optim.step,
            "beta1": optim.beta1,
            "beta2": optim.beta2,
            "eps": optim.eps,
            "tensors": entries,
        }
        _write_json(root / "optim.json", meta)
        (root / "optim.bin").write_bytes(blob)
    return root


def checkpoint_id(path) -> str:
    return hashlib.sha256((Path(path) / "params.bin").read_bytes()).hexdigest()[:16]


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[RegionVLP, OptimState | None]:
    """Rebuild a model (and optimizer state, if saved) from a checkpoint directory.

    When ``config`` is given it must match the stored tensor names and shapes.
    """
    root = Path(path)
    try:
        stored_config = ModelConfig.from_dict(json.loads((root / "config.json").read_text()))
        entries = json.loads((root / "params.json").read_text())
        blob = (root / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {root}: {exc.filename}") from exc
    config = config or stored_config
    model = RegionVLP(config)
    arrays = _read_table(entries, blob, str(root / "params.bin"))
    expected = model.state_dict()
    if list(arrays) != list(expected):
        missing = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"parameter name mismatch: {missing[:5]}")
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(arr.shape)} vs model {tuple(expected[name].shape)}"
            )
    model.load_state_dict({n: torch.from_numpy(a) for n, a in arrays.items()})
    model.eval()

    optim = None
    if (root / "optim.json").exists():
        meta = json.loads((root / "optim.json").read_text())
        moments = _read_table(meta["tensors"], (root / "optim.bin").read_bytes(), str(root / "optim.bin"))
        optim = OptimState(step=int(meta["step"]), beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        for key, arr in moments.items():
            kind, name = key.split(".", 1)
            getattr(optim, kind)[name] = torch.from_numpy(arr)
    return model, optim
