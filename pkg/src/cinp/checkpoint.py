"""Binary checkpoints: magic "CINP", version, JSON header, raw f64 records.

Layout:

    bytes 0..3   magic b"CINP"
    bytes 4..7   format version, little-endian u32
    bytes 8..15  header length, little-endian u64
    header       UTF-8 JSON: config snapshot, step, optimizer scalars,
                 and a record table (name, kind, shape, offset, nbytes)
    payload      the records' raw little-endian float64 bytes, in table order

Loading is strict: wrong magic or truncation raises CorruptCheckpoint, a
different version raises VersionMismatch, and every parameter shape is
checked against the shape table derived from the embedded config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoders import ModelParams, param_spec
from .errors import CorruptCheckpoint, ShapeMismatch, VersionMismatch
from .optim import AdamState

MAGIC = b"CINP"
FORMAT_VERSION = 1

Array = np.ndarray


@dataclass
class Checkpoint:
    """Parameters, optimizer state, config snapshot and training step."""

    config: dict
    params: ModelParams
    opt_state: AdamState
    step: int

    def visual_cfg(self):
        from .config import Config
        return Config.from_dict(self.config).visual_cfg()

    def network_cfg(self):
        from .config import Config
        return Config.from_dict(self.config).network_cfg()


def save_checkpoint(path: str | Path, params: ModelParams, opt_state: AdamState,
                    config: dict, step: int) -> Path:
    """Write a checkpoint; byte output is a pure function of the arguments."""
    records = []
    payload_parts = []
    offset = 0

    def push(name: str, kind: str, arr: Array):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=np.float64).astype("<f8").tobytes()
        records.append({
            "name": name,
            "kind": kind,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payload_parts.append(raw)
        offset += len(raw)

    for name in sorted(params.tensors):
        push(name, "param", params.tensors[name].data)
    for name in sorted(opt_state.first_moment):
        push(name, "adam_m", opt_state.first_moment[name])
    for name in sorted(opt_state.second_moment):
        push(name, "adam_v", opt_state.second_moment[name])

    header = json.dumps({
        "config": config,
        "step": int(step),
        "optimizer": {
            "step_count": int(opt_state.step_count),
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "epsilon": opt_state.epsilon,
        },
        "records": records,
    }, sort_keys=True).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(b"".join(payload_parts))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a checkpoint; tensors round-trip bit-exactly."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic or truncated preamble")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header_len = int.from_bytes(blob[8:16], "little")
    if len(blob) < 16 + header_len:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + header_len])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header: {exc}") from exc

    payload = blob[16 + header_len:]
    records = header.get("records", [])
    expected_payload = sum(r["nbytes"] for r in records)
    if len(payload) != expected_payload:
        raise CorruptCheckpoint(
            f"{path}: payload is {len(payload)} bytes, expected {expected_payload}")

    arrays: dict[str, dict[str, Array]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for rec in records:
        start, n = rec["offset"], rec["nbytes"]
        arr = np.frombuffer(payload[start:start + n], dtype="<f8")
        shape = tuple(rec["shape"])
        if arr.size != int(np.prod(shape)):
            raise CorruptCheckpoint(
                f"{path}: record {rec['name']!r} size/shape mismatch")
        arrays[rec["kind"]][rec["name"]] = arr.reshape(shape).copy()

    config = header.get("config")
    if not isinstance(config, dict):
        raise CorruptCheckpoint(f"{path}: missing config snapshot")
    from .config import Config
    cfg = Config.from_dict(config)
    expected_shapes = {name: shape for name, (shape, _) in
                       param_spec(cfg.visual_cfg(), cfg.network_cfg()).items()}
    got = arrays["param"]
    if set(got) != set(expected_shapes):
        missing = sorted(set(expected_shapes) ^ set(got))
        raise CorruptCheckpoint(f"{path}: parameter set differs at {missing[:4]}")
    for name, shape in expected_shapes.items():
        if got[name].shape != shape:
            raise ShapeMismatch(
                f"{path}: tensor {name!r} has shape {got[name].shape}, "
                f"config implies {shape}")
        for kind in ("adam_m", "adam_v"):
            if arrays[kind].get(name) is None or arrays[kind][name].shape != shape:
                raise CorruptCheckpoint(f"{path}: optimizer moment missing for {name!r}")

    # preserve construction order so downstream iteration is deterministic
    ordered = {name: Tensor(got[name], requires_grad=True) for name in expected_shapes}
    opt = header["optimizer"]
    state = AdamState(
        first_moment={n: arrays["adam_m"][n] for n in expected_shapes},
        second_moment={n: arrays["adam_v"][n] for n in expected_shapes},
        step_count=int(opt["step_count"]),
        beta1=float(opt["beta1"]),
        beta2=float(opt["beta2"]),
        epsilon=float(opt["epsilon"]),
    )
    return Checkpoint(config=config, params=ModelParams(ordered),
                      opt_state=state, step=int(header["step"]))
