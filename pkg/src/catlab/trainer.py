"""Optimization loop: Adam with warmup + inverse-sqrt decay, coordinate
freezing, checkpointing, and checkpoint averaging.

Freezing is enforced at the optimizer: masked coordinates never have their
parameter values or moment entries touched, so they stay bit-identical to the
pre-training snapshot for any number of steps.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import math

import numpy as np

from catlab.model import Batch, ModelConfig, loss_and_grads, make_batch, param_shapes

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CATCKPT1"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to lr_max, then inverse square-root decay."""

    lr_max: float = 4e-4
    warmup_steps: int = 4000

    def __post_init__(self):
        if self.lr_max <= 0 or self.warmup_steps < 1:
            raise ValueError("lr_max must be > 0 and warmup_steps >= 1")


def lr_at(schedule: Schedule, step: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    if step <= schedule.warmup_steps:
        return schedule.lr_max * step / schedule.warmup_steps
    return schedule.lr_max * math.sqrt(schedule.warmup_steps / step)


@dataclass
class FreezeMask:
    """Trainable-set descriptor: None means everything is trainable; otherwise
    a map param name -> True (whole tensor) or boolean array (per coordinate).
    Tensors absent from the map are fully frozen."""

    trainable: dict | None = None

    @classmethod
    def all_trainable(cls) -> "FreezeMask":
        return cls(trainable=None)

    @classmethod
    def only_tensors(cls, names) -> "FreezeMask":
        return cls(trainable={name: True for name in names})

    @classmethod
    def embedding_row(cls, row: int, vocab_size: int) -> "FreezeMask":
        mask = np.zeros(vocab_size, dtype=bool)
        mask[row] = True
        return cls(trainable={"embedding": mask})

    def trainable_count(self, params: dict) -> int:
        """Number of trainable scalars; accepts arrays or bare shape tuples as
        dict values (the latter avoids allocating huge parameter sets)."""

        def size_of(p):
            return int(p.size) if hasattr(p, "size") else int(np.prod(p))

        if self.trainable is None:
            return sum(size_of(p) for p in params.values())
        count = 0
        for name, sel in self.trainable.items():
            n = size_of(params[name])
            if sel is True:
                count += n
            else:
                per_coord = n // np.size(sel)
                count += int(np.count_nonzero(sel)) * per_coord
        return count

    def selector(self, name: str):
        """None if tensor fully frozen, True if fully trainable, else bool index."""
        if self.trainable is None:
            return True
        return self.trainable.get(name)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple = (0.9, 0.98)
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: dict, betas=(0.9, 0.98), epsilon=1e-8) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            betas=betas,
            epsilon=epsilon,
        )


def adam_step(params, grads, state: OptimizerState, mask: FreezeMask, lr: float):
    """One bias-corrected Adam update restricted to unmasked coordinates.

    Updates params and state in place and returns them. Masked coordinates of
    params, m and v are untouched (bit-identical to their inputs).
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        sel = mask.selector(name)
        if sel is None:
            continue
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if sel is True:
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        else:
            gs = g[sel]
            m[sel] = b1 * m[sel] + (1.0 - b1) * gs
            v[sel] = b2 * v[sel] + (1.0 - b2) * gs * gs
            p[sel] = p[sel] - lr * (m[sel] / c1) / (np.sqrt(v[sel] / c2) + state.epsilon)
    return params, state


# ------------------------------------------------------------- checkpointing


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict
    step: int
    config_hash: str
    config: dict | None = None  # full model config, stored in the file header

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return load_checkpoint(path)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u64 header length, JSON header (step, config,
    tensor index), then raw tensor bytes.

    Tensors are serialized in sorted name order with explicit little-endian
    dtypes, so load(save(x)) round-trips bit-exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        le = arr.dtype.newbyteorder("<")
        data = arr.astype(le, copy=False).tobytes()
        tensors.append({"name": name, "dtype": le.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"step": ckpt.step, "config_hash": ckpt.config_hash,
         "config": ckpt.config, "tensors": tensors}
    ).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode())
        data = f.read()
    params = {}
    for spec in header["tensors"]:
        buf = data[spec["offset"] : spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(spec["dtype"]))
        params[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return Checkpoint(params=params, step=header["step"],
                      config_hash=header["config_hash"],
                      config=header.get("config"))


def average_checkpoints(checkpoints: list) -> dict:
    """Elementwise arithmetic mean of parameters (float64 accumulation)."""
    if not checkpoints:
        raise ValueError("cannot average an empty checkpoint list")
    hashes = {c.config_hash for c in checkpoints}
    if len(hashes) > 1:
        raise ValueError(f"config hash mismatch across checkpoints: {hashes}")
    k = len(checkpoints)
    out = {}
    for name, first in checkpoints[0].params.items():
        acc = np.zeros(first.shape, dtype=np.float64)
        for c in checkpoints:
            acc += c.params[name]
        out[name] = (acc / k).astype(first.dtype)
    return out


# ------------------------------------------------------------------ batching


def _epoch_seed(seed: int, epoch: int) -> int:
    digest = hashlib.sha256(f"{seed}|epoch|{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def token_batches(examples: list, max_tokens: int, seed: int = 0):
    """Endless deterministic batch stream with length bucketing.

    Examples are sorted by length and chunked so that padded source+target
    tokens stay under max_tokens; batch order reshuffles every epoch from a
    seed derived from (seed, epoch).
    """
    if not examples:
        raise ValueError("no examples to batch")
    lengths = [len(e.source_tokens) + len(e.target_tokens) for e in examples]
    order = np.argsort(np.array(lengths), kind="stable")
    chunks = []
    current: list = []
    cur_max = 0
    for i in order:
        new_max = max(cur_max, lengths[i])
        if current and (len(current) + 1) * new_max > max_tokens:
            chunks.append(current)
            current, cur_max = [int(i)], lengths[i]
        else:
            current.append(int(i))
            cur_max = new_max
    if current:
        chunks.append(current)
    epoch = 0
    while True:
        rng = np.random.default_rng(_epoch_seed(seed, epoch))
        for ci in rng.permutation(len(chunks)):
            idx = chunks[ci]
            yield make_batch(
                [list(examples[i].source_tokens) for i in idx],
                [list(examples[i].target_tokens) for i in idx],
            )
        epoch += 1


# ---------------------------------------------------------------- train loop


def _step_seed(seed: int, step: int) -> int:
    digest = hashlib.sha256(f"{seed}|step|{step}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class TrainResult:
    params: dict
    checkpoints: list
    losses: list = field(default_factory=list)


def train_loop(
    params: dict,
    batches,
    config: ModelConfig,
    schedule,
    steps: int,
    mask: FreezeMask | None = None,
    seed: int = 0,
    state: OptimizerState | None = None,
    checkpoint_every: int | None = None,
    checkpoint_dir=None,
    checkpoint_keep: int | None = None,
    log_every: int = 500,
) -> TrainResult:
    """Run `steps` optimizer steps over a deterministic batch stream.

    `schedule` is either a Schedule or a plain float (constant learning rate,
    used by the fine-tuners). Works on a copy of params; the caller's dict is
    never mutated. Aborts with NonFiniteLossError if the loss stops being
    finite.
    """
    mask = mask or FreezeMask.all_trainable()
    params = {k: p.copy() for k, p in params.items()}
    if steps == 0:
        return TrainResult(params=params, checkpoints=[])
    state = state or OptimizerState.fresh(params)
    chash = config_hash(config)
    checkpoints = []
    losses = []
    batch_iter = iter(batches)
    for step in range(1, steps + 1):
        batch = next(batch_iter)
        lr = lr_at(schedule, step) if isinstance(schedule, Schedule) else float(schedule)
        loss, grads = loss_and_grads(
            params, batch, config, mode="train", dropout_seed=_step_seed(seed, step)
        )
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss} at step {step} (lr={lr:.3g}); aborting"
            )
        losses.append(loss)
        adam_step(params, grads, state, mask, lr)
        if step % log_every == 0 or step == steps:
            recent = losses[-log_every:]
            logger.info("step %d/%d loss %.4f", step, steps,
                        sum(recent) / len(recent))
        if checkpoint_every and step % checkpoint_every == 0:
            ckpt = Checkpoint(params={k: p.copy() for k, p in params.items()},
                              step=step, config_hash=chash,
                              config=dataclasses.asdict(config))
            checkpoints.append(ckpt)
            if checkpoint_keep is not None and len(checkpoints) > checkpoint_keep:
                checkpoints.pop(0)
            if checkpoint_dir is not None:
                ckpt.save(Path(checkpoint_dir) / f"ckpt_{step}.bin")
    if checkpoint_dir is not None:
        meta = {"steps": steps, "config_hash": chash, "seed": seed,
                "checkpoint_every": checkpoint_every}
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        (Path(checkpoint_dir) / "meta.json").write_text(json.dumps(meta, indent=2))
    return TrainResult(params=params, checkpoints=checkpoints, losses=losses)
