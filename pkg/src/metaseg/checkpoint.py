"""Checkpoint persistence: plain-text manifest + raw little-endian payload.

Layout of a checkpoint file: a UTF-8 manifest (one entry per line,
terminated by an ``end`` line), immediately followed by the binary
payload — every listed array's bytes concatenated in manifest order,
little-endian. The manifest carries enough architecture information to
rebuild the model, so loading never needs the original config file; the
config hash only guards against silently resuming a mismatched run.
Round-trips are bitwise exact, including optimizer momentum and
normalization statistics.
"""

from __future__ import annotations

import io
import numpy as np

from .network import DecoderConfig, EncoderConfig, SegModel

MAGIC = "metaseg-checkpoint v1"


class CheckpointError(ValueError):
    pass


def _le_dtype(arr: np.ndarray) -> str:
    return np.dtype(arr.dtype).newbyteorder("<").str


def _entries(model: SegModel):
    """(kind, name, array) triples in a deterministic order."""
    for name, p in model.params.items():
        yield "param", name, p.value.data
        yield "momentum", name, p.momentum_buffer
    for name, s in model.bn_stats.items():
        yield "norm_mean", name, s["mean"]
        yield "norm_var", name, s["var"]
        yield "norm_count", name, np.array([s["count"]], dtype=np.int64)


def save_checkpoint(model: SegModel, path, iteration: int = 0,
                    miou=None, config_hash: str = "-") -> None:
    enc, dec = model.encoder_config, model.decoder_config
    head = [
        MAGIC,
        f"config_hash {config_hash}",
        f"iteration {iteration}",
        f"miou {'-' if miou is None else f'{miou:.6f}'}",
        f"encoder.channels {','.join(map(str, enc.channels))}",
        f"encoder.blocks_per_stage {enc.blocks_per_stage}",
        f"decoder.patch {dec.patch}",
        f"decoder.ratios {','.join(map(str, dec.ratios))}",
        f"decoder.embed {dec.embed}",
        f"decoder.heads {dec.heads}",
        f"decoder.num_classes {dec.num_classes}",
    ]
    body = io.BytesIO()
    for kind, name, arr in _entries(model):
        shape = ",".join(map(str, arr.shape)) or "0"
        head.append(f"tensor {kind} {name} {_le_dtype(arr)} {shape}")
        body.write(np.ascontiguousarray(arr).astype(_le_dtype(arr)).tobytes())
    head.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode())
        f.write(body.getvalue())


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p)


def load_checkpoint(path, expected_config_hash=None):
    """Rebuild the model from a checkpoint file.

    Returns ``(model, meta)``; ``meta`` reports iteration, stored mIoU,
    config hash and a ``config_mismatch`` flag when an expected hash is
    given and differs (a warning condition, not an error).
    """
    with open(path, "rb") as f:
        blob = f.read()
    lines = []
    offset = 0
    while True:
        nl = blob.find(b"\n", offset)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated manifest (no end marker)")
        line = blob[offset:nl].decode()
        offset = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")

    fields = {}
    tensors = []
    for line in lines[1:]:
        if line.startswith("tensor "):
            _, kind, name, dt, shape = line.split(" ")
            tensors.append((kind, name, dt, _ints(shape)))
        else:
            key, _, val = line.partition(" ")
            fields[key] = val

    try:
        enc = EncoderConfig(channels=_ints(fields["encoder.channels"]),
                            blocks_per_stage=int(fields["encoder.blocks_per_stage"]))
        dec = DecoderConfig(patch=int(fields["decoder.patch"]),
                            ratios=_ints(fields["decoder.ratios"]),
                            embed=int(fields["decoder.embed"]),
                            heads=int(fields["decoder.heads"]),
                            num_classes=int(fields["decoder.num_classes"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: manifest missing {exc}") from exc
    model = SegModel(enc, dec, seed=0)

    payload = blob[offset:]
    pos = 0
    for kind, name, dt, shape in tensors:
        n = int(np.prod(shape)) if shape != (0,) else 1
        nbytes = n * np.dtype(dt).itemsize
        if pos + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload shorter than manifest claims")
        arr = np.frombuffer(payload[pos:pos + nbytes], dtype=dt)
        arr = arr.reshape(shape if shape != (0,) else ()).copy()
        pos += nbytes
        if kind in ("param", "momentum") and name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {name}")
        if kind == "param":
            if model.params[name].value.data.shape != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            model.params[name].value.data = arr
        elif kind == "momentum":
            model.params[name].momentum_buffer = arr
        elif kind in ("norm_mean", "norm_var", "norm_count"):
            if name not in model.bn_stats:
                raise CheckpointError(f"{path}: unknown norm layer {name}")
            key = kind.split("_")[1]
            model.bn_stats[name][key] = int(arr[0]) if kind == "norm_count" else arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {kind}")
    if pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - pos} trailing payload bytes")

    stored = fields.get("config_hash", "-")
    meta = {
        "iteration": int(fields.get("iteration", 0)),
        "miou": None if fields.get("miou", "-") == "-" else float(fields["miou"]),
        "config_hash": stored,
        "config_mismatch": (expected_config_hash is not None
                            and stored != expected_config_hash),
    }
    return model, meta
