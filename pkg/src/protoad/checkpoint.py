"""Binary model checkpoints.

Layout (all integers little-endian):

====================  =====================================================
bytes                 content
====================  =====================================================
4                     magic ``DNPC``
2 (u16)               format version, currently 1
4 (u32)               header byte length
variable              UTF-8 header, one ``key=value`` per line
4 (u32)               parameter array count
per array             u32 element count, then that many float32 values
8 (u64)               checksum: 8-byte blake2b digest of all prior bytes
====================  =====================================================

Parameter order is fixed: the trainable tree (encoder, prototype bank,
bottleneck, decoder) in declaration order, then the reference encoder if
the variant carries one. Loading refuses any version other than the
current one and any checksum mismatch. Values are stored as float32, so
save/load round-trips are bit-exact for float32 models.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import vit
from .errors import CheckpointError
from .params import clone
from .recon import ModelConfig, ModelState, Variant, build_model
from .rng import stream

MAGIC = b"DNPC"
VERSION = 1


def _digest(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def _header_text(state: ModelState, seed: int) -> str:
    cfg = state.config
    enc = cfg.encoder
    pairs = [
        ("mode", state.mode.value),
        ("image_size", enc.image_size),
        ("channels", enc.channels),
        ("patch", enc.patch),
        ("dim", enc.dim),
        ("depth", enc.depth),
        ("heads", enc.heads),
        ("ffn_mult", enc.ffn_mult),
        ("pos_init_std", repr(enc.pos_init_std)),
        ("extract", ",".join(str(i) for i in enc.extract)),
        ("decoder_depth", cfg.decoder_depth),
        ("m", cfg.m),
        ("beta", repr(cfg.beta)),
        ("lambda", repr(cfg.lam)),
        ("proto_kind", cfg.proto_kind),
        ("mining", int(cfg.mining)),
        ("mining_gamma", repr(cfg.mining_gamma)),
        ("mining_wmax", repr(cfg.mining_wmax)),
        ("global_cosine", int(cfg.global_cosine)),
        ("seed", seed),
        ("step", state.step),
        ("has_ref", int(state.ref_encoder is not None)),
    ]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def save_checkpoint(path: str, state: ModelState, seed: int = 0) -> None:
    header = _header_text(state, seed).encode("utf-8")
    arrays = [t.data for _, t in state.all_named()]
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    parts.append(struct.pack("<I", len(arrays)))
    for arr in arrays:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(_digest(blob))


def _parse_header(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed header line {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def config_from_header(h: dict[str, str]) -> ModelConfig:
    try:
        enc = vit.EncoderConfig(
            image_size=int(h["image_size"]),
            channels=int(h["channels"]),
            patch=int(h["patch"]),
            dim=int(h["dim"]),
            depth=int(h["depth"]),
            heads=int(h["heads"]),
            ffn_mult=int(h["ffn_mult"]),
            pos_init_std=float(h["pos_init_std"]),
            extract=tuple(int(s) for s in h["extract"].split(",")),
        )
        return ModelConfig(
            encoder=enc,
            decoder_depth=int(h["decoder_depth"]),
            m=int(h["m"]),
            lam=float(h["lambda"]),
            beta=float(h["beta"]),
            proto_kind=h["proto_kind"],
            mining=bool(int(h["mining"])),
            mining_gamma=float(h["mining_gamma"]),
            mining_wmax=float(h["mining_wmax"]),
            global_cosine=bool(int(h["global_cosine"])),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"incomplete or malformed checkpoint header: {e}") from None


def load_checkpoint(path: str) -> tuple[ModelState, dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 + 2 + 4 + 4 + 8:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    body, checksum = blob[:-8], blob[-8:]
    if _digest(body) != checksum:
        raise CheckpointError(f"{path}: checksum mismatch; refusing to load")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported; "
            f"this build reads version {VERSION} only"
        )
    (hlen,) = struct.unpack_from("<I", body, 6)
    pos = 10
    header = _parse_header(body[pos : pos + hlen].decode("utf-8"))
    pos += hlen

    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = []
    for _ in range(count):
        if pos + 4 > len(body):
            raise CheckpointError(f"{path}: truncated parameter table")
        (numel,) = struct.unpack_from("<I", body, pos)
        pos += 4
        end = pos + 4 * numel
        if end > len(body):
            raise CheckpointError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(body[pos:end], dtype="<f4").copy())
        pos = end
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} unexpected trailing bytes")

    config = config_from_header(header)
    mode = Variant.parse(header.get("mode", ""))
    state = build_model(mode, config, stream(0, "model-init"), dtype=np.float32)
    if int(header.get("has_ref", "0")):
        state.ref_encoder = clone(state.encoder, requires_grad=False)
    state.step = int(header.get("step", "0"))

    slots = list(state.all_named())
    if len(slots) != count:
        raise CheckpointError(
            f"{path}: checkpoint holds {count} arrays but the configured model has {len(slots)}"
        )
    for (name, t), arr in zip(slots, arrays):
        if arr.size != t.size:
            raise CheckpointError(f"{path}: array size mismatch for {name}")
        t.data = arr.reshape(t.shape)
    return state, header
