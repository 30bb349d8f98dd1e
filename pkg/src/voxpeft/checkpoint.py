"""Versioned binary checkpoints.

Layout: magic "PTIT", format version (u32 LE), header length (u64 LE), a
UTF-8 JSON header (arch config, fine-tuning plan, epoch, rng state, blob
manifest), then every manifest entry as raw little-endian float64. Saving
and loading round-trip bitwise; resuming from a checkpoint reproduces the
uninterrupted run exactly.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .mixpeft import compose, plan_from_dict, plan_to_dict
from .models import ArchConfig, build_model
from .volumeio import atomic_write_bytes

MAGIC = b"PTIT"
VERSION = 1
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: ArchConfig
    params: dict
    plan: object = None
    epoch: int = 0
    opt_state: dict = None
    rng_state: dict = None


def config_from_dict(d):
    d = dict(d)
    d["skip_layer_indices"] = tuple(d.get("skip_layer_indices", ()))
    return ArchConfig(**d)


def save_checkpoint(path, ckpt):
    entries = []
    blobs = []

    def push(name, role, array):
        array = np.ascontiguousarray(array, dtype=np.float64)
        entries.append({"name": name, "role": role, "shape": list(array.shape)})
        blobs.append(array.astype(_DTYPE).tobytes())

    for name, values in ckpt.params.items():
        push(name, "param", values)
    opt_header = None
    if ckpt.opt_state is not None:
        opt_header = {"step_count": int(ckpt.opt_state["step_count"])}
        for role in ("exp_avg", "exp_avg_sq"):
            for name, values in ckpt.opt_state[role].items():
                push(name, role, values)
    header = {
        "arch": ckpt.config.as_dict(),
        "plan": plan_to_dict(ckpt.plan) if ckpt.plan is not None else None,
        "epoch": int(ckpt.epoch),
        "opt": opt_header,
        "rng_state": ckpt.rng_state,
        "entries": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = MAGIC + struct.pack("<IQ", VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)
    atomic_write_bytes(path, payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} not supported (expected {VERSION})")
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    blob = raw[16 + header_len:]
    params = {}
    opt_state = None
    if header["opt"] is not None:
        opt_state = {"step_count": header["opt"]["step_count"], "exp_avg": {}, "exp_avg_sq": {}}
    offset = 0
    for entry in header["entries"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = n * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload at entry {entry['name']}")
        array = np.frombuffer(blob[offset:offset + nbytes], dtype=_DTYPE).reshape(entry["shape"]).astype(np.float64)
        offset += nbytes
        if entry["role"] == "param":
            params[entry["name"]] = array
        else:
            opt_state[entry["role"]][entry["name"]] = array
    return Checkpoint(
        config=config_from_dict(header["arch"]),
        params=params,
        plan=plan_from_dict(header["plan"]) if header["plan"] else None,
        epoch=header["epoch"],
        opt_state=opt_state,
        rng_state=header["rng_state"],
    )


def checkpoint_of(model, plan=None, epoch=0, opt=None, rng=None):
    return Checkpoint(
        config=model.config,
        params=model.state_arrays(),
        plan=plan,
        epoch=epoch,
        opt_state=opt.state_dict() if opt is not None else None,
        rng_state=rng_state_to_jsonable(rng.bit_generator.state) if rng is not None else None,
    )


def restore_model(ckpt, build_seed=0):
    """Rebuild the architecture (and plan, if any), then load saved values."""
    model = build_model(ckpt.config, seed=build_seed)
    if ckpt.plan is not None:
        compose(ckpt.plan, model, seed=build_seed)
    if set(model.params) != set(ckpt.params):
        missing = sorted(set(model.params) ^ set(ckpt.params))[:4]
        raise CheckpointError(f"checkpoint does not match the model structure (first diffs: {missing})")
    for path, values in ckpt.params.items():
        tensor = model.params[path].tensor
        if tensor.data.shape != values.shape:
            raise CheckpointError(f"shape mismatch at {path}: {tensor.data.shape} vs {values.shape}")
        tensor.data[...] = values
    return model


def rng_state_to_jsonable(state):
    """np.random bit-generator state dicts hold big ints; JSON keeps them exact."""
    return json.loads(json.dumps(state))


def rng_from_state(state):
    rng = np.random.default_rng()
    if state["bit_generator"] != rng.bit_generator.state["bit_generator"]:
        raise CheckpointError(f"unsupported rng kind {state['bit_generator']}")
    rng.bit_generator.state = state
    return rng
