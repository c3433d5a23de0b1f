"""The SGD training loop, loss traces, and parameter checkpoints.

One episode per step, plain gradient descent, a CSV trace of every loss,
and DSPC checkpoints (same header discipline as the feature files: magic,
explicit extents, little-endian float64 payload). Runs with identical
config and seeds produce byte-identical traces and checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    NonFiniteError,
    TrainingAbortedError,
)
from .config import RunConfig
from .episodes import EpisodeSampler
from .phantoms import generate_dataset

DSPC_MAGIC = b"DSPC"

TRACE_HEADER = "step,support_id,query_id,class_id,loss,seg_loss,reg_loss"


def save_checkpoint(path, state: dict) -> None:
    """Write named float64 arrays; names sorted so bytes are canonical."""
    parts = [DSPC_MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    """Read a DSPC checkpoint back into a name -> array dict."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != DSPC_MAGIC:
        raise CheckpointFormatError(f"{path}: not a DSPC checkpoint")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    state = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise CheckpointTruncatedError(f"{path}: truncated at entry header")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + name_len + 1 > len(raw):
            raise CheckpointTruncatedError(f"{path}: truncated inside a name")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        ndim = raw[pos]
        pos += 1
        if pos + 4 * ndim > len(raw):
            raise CheckpointTruncatedError(f"{path}: truncated inside extents")
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        if pos + size > len(raw):
            raise CheckpointTruncatedError(f"{path}: payload of {name!r} cut short")
        state[name] = (
            np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos)
            .reshape(shape)
            .astype(np.float64)
        )
        pos += size
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return state


@dataclass
class TrainResult:
    params_state: dict
    rows: list  # (step, support_id, query_id, class_id, loss, seg, reg)
    trace_path: Path
    checkpoint_path: Path


def _write_trace(path: Path, rows) -> None:
    lines = [TRACE_HEADER]
    for step, sid, qid, cid, loss, seg, reg in rows:
        lines.append(f"{step},{sid},{qid},{cid},{loss:.17g},{seg:.17g},{reg:.17g}")
    path.write_text("\n".join(lines) + "\n")


def train(config: RunConfig, out_dir=None, log=None) -> TrainResult:
    """Run the configured training; returns the final state and trace."""
    out = Path(out_dir if out_dir is not None else config["train.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    size = config["data.image_size"]
    phantoms = generate_dataset(
        config["data.seed"], config["data.num_slices"], size, size,
        config["data.num_classes"],
    )
    sampler = EpisodeSampler(
        phantoms, config["episodes.folds"], config["episodes.fold"],
        config["episodes.setting"], config["episodes.seed"],
        config["episodes.source"],
    )
    model = config.build_model()
    rng = np.random.default_rng(config["train.seed"])
    steps = config["train.steps"]
    lr = config["train.lr"]
    every = config["train.checkpoint_every"]
    rows = []
    last_checkpoint = None
    for step in range(1, steps + 1):
        episode = sampler.sample(rng)
        try:
            loss, _, parts = model.total_loss(episode)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            grads = nx.backward(loss, model.params)
            model.params.sgd_step(grads, lr)
        except NonFiniteError as exc:
            raise TrainingAbortedError(step, last_checkpoint) from exc
        rows.append((step, episode.support_id, episode.query_id,
                     episode.class_id, value, parts["seg"], parts["reg"]))
        if step % every == 0 and step != steps:
            last_checkpoint = out / f"ckpt_{step:06d}.bin"
            save_checkpoint(last_checkpoint, model.params.state())
        if log is not None and (step % 100 == 0 or step == 1):
            recent = [r[4] for r in rows[-100:]]
            log(f"step {step:6d}  loss {value:8.4f}  mean(100) {np.mean(recent):8.4f}")
    final = out / "ckpt_final.bin"
    save_checkpoint(final, model.params.state())
    trace = out / "trace.csv"
    _write_trace(trace, rows)
    return TrainResult(model.params.state(), rows, trace, final)
