"""Versioned binary checkpoints with per-section checksums.

Container layout, all integers little-endian:

    magic   8 bytes  b"RSSLCKPT"
    version u32
    then repeated sections until EOF:
        name length  u16
        name         utf-8 bytes
        payload len  u64
        payload crc  u32 (crc32 of the payload bytes)
        payload

Array payloads carry their own shape header (u8 ndim, u64 dims) followed by
raw little-endian float64 data, so the format is self-describing and
portable. Text sections (configs, counters, RNG state) are JSON. Writes go
to a temporary file in the same directory and are renamed into place.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .autodiff import Tensor
from .crops import MultiCropConfig
from .distill import DistillConfig, TrainState
from .errors import (CheckpointChecksumError, CheckpointError,
                     CheckpointMagicError, CheckpointTruncationError,
                     CheckpointVersionError)
from .vit import ProjectionHeadConfig, ViTConfig

MAGIC = b"RSSLCKPT"
FORMAT_VERSION = 1


def _pack_section(name: str, payload: bytes) -> bytes:
    nb = name.encode()
    return (struct.pack("<H", len(nb)) + nb
            + struct.pack("<QI", len(payload), zlib.crc32(payload) & 0xFFFFFFFF)
            + payload)


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = struct.pack("<B", arr.ndim)
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return header + arr.tobytes()


def _unpack_array(payload: bytes) -> np.ndarray:
    if len(payload) < 1:
        raise CheckpointTruncationError("empty array payload")
    ndim = payload[0]
    need = 1 + 8 * ndim
    if len(payload) < need:
        raise CheckpointTruncationError("array shape header cut short")
    shape = struct.unpack_from(f"<{ndim}Q", payload, 1)
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) != need + 8 * count:
        raise CheckpointTruncationError(
            f"array payload holds {len(payload) - need} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8", count=count,
                         offset=need).reshape(shape).copy()


def _config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _config_from_dict(cls, raw: dict):
    # JSON loses tuples; restore them per-field from the dataclass defaults.
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        v = raw[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def save_checkpoint(state: TrainState, path, vit_config: ViTConfig,
                    head_config: ProjectionHeadConfig, crop_config: MultiCropConfig,
                    distill_config: DistillConfig) -> None:
    sections: list[bytes] = []

    meta = {"step": state.step, "rng_state": state.rng.bit_generator.state}
    sections.append(_pack_section("meta", json.dumps(meta).encode()))
    configs = {"vit": _config_dict(vit_config), "head": _config_dict(head_config),
               "crop": _config_dict(crop_config),
               "distill": _config_dict(distill_config)}
    sections.append(_pack_section("configs", json.dumps(configs).encode()))
    sections.append(_pack_section("center", _pack_array(state.center)))
    for group, params in (("student", state.student), ("teacher", state.teacher)):
        for key in sorted(params):
            sections.append(_pack_section(f"{group}/{key}",
                                          _pack_array(params[key].data)))
    for group, moments in (("opt_m", state.opt_m), ("opt_v", state.opt_v)):
        for key in sorted(moments):
            sections.append(_pack_section(f"{group}/{key}",
                                          _pack_array(moments[key])))

    blob = MAGIC + struct.pack("<I", FORMAT_VERSION) + b"".join(sections)
    directory = os.path.dirname(os.path.abspath(str(path)))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt_tmp_")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, str(path))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_sections(blob: bytes) -> dict[str, bytes]:
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointTruncationError("file shorter than the fixed header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad magic bytes {blob[:8]!r}")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"format version {version}, this build reads {FORMAT_VERSION}")
    sections: dict[str, bytes] = {}
    pos = len(MAGIC) + 4
    while pos < len(blob):
        if pos + 2 > len(blob):
            raise CheckpointTruncationError("section name length cut short")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + nlen + 12 > len(blob):
            raise CheckpointTruncationError("section header cut short")
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        plen, crc = struct.unpack_from("<QI", blob, pos)
        pos += 12
        payload = blob[pos:pos + plen]
        if len(payload) != plen:
            raise CheckpointTruncationError(f"section {name!r} payload cut short")
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise CheckpointChecksumError(f"checksum mismatch in section {name!r}")
        sections[name] = payload
        pos += plen
    return sections


def load_checkpoint(path):
    """Read a checkpoint; returns (TrainState, vit, head, crop, distill configs)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sections = _read_sections(blob)
    for required in ("meta", "configs", "center"):
        if required not in sections:
            raise CheckpointError(f"checkpoint missing section {required!r}")
    meta = json.loads(sections["meta"])
    cfg_raw = json.loads(sections["configs"])
    vit = _config_from_dict(ViTConfig, cfg_raw["vit"])
    head = _config_from_dict(ProjectionHeadConfig, cfg_raw["head"])
    crop = _config_from_dict(MultiCropConfig, cfg_raw["crop"])
    distill = _config_from_dict(DistillConfig, cfg_raw["distill"])

    groups: dict[str, dict[str, np.ndarray]] = {
        "student": {}, "teacher": {}, "opt_m": {}, "opt_v": {}}
    for name, payload in sections.items():
        if "/" in name:
            group, key = name.split("/", 1)
            if group in groups:
                groups[group][key] = _unpack_array(payload)
    student = {k: Tensor(v, requires_grad=True) for k, v in groups["student"].items()}
    teacher = {k: Tensor(v, requires_grad=False) for k, v in groups["teacher"].items()}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(student=student, teacher=teacher,
                       center=_unpack_array(sections["center"]),
                       opt_m=groups["opt_m"], opt_v=groups["opt_v"],
                       step=int(meta["step"]), rng=rng)
    return state, vit, head, crop, distill
