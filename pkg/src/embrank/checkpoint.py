"""Versioned binary checkpoint container for encoder, projector, and LM.

Layout: 8 magic bytes, little-endian u32 format version, u64 header length,
a canonical JSON header (metadata plus the ordered array manifest with
shapes), then the raw float32 little-endian blobs in manifest order.
Weights are float64 in memory and downcast on save; that is the one
intentional precision loss, and it makes load-then-save reproduce the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .lm import DecoderLm, LmConfig
from .numerics import Parameter
from .projector import Projector
from .retrieval import HashEncoder
from .templates import TEMPLATE_VERSION

MAGIC = b"EBRKCKPT"
FORMAT_VERSION = 1

STAGE_NONE = "none"


@dataclass
class CheckpointBundle:
    encoder: HashEncoder
    projector: Projector
    lm: DecoderLm
    meta: dict


def _sections(encoder: HashEncoder, projector: Projector, lm: DecoderLm) -> list[tuple[str, Parameter]]:
    entries: list[tuple[str, Parameter]] = [("encoder.table", encoder.table)]
    entries += [(p.name, p) for p in projector.parameters()]
    entries += [(p.name, p) for p in lm.parameters()]
    return entries


def save_checkpoint(
    path: str | Path,
    encoder: HashEncoder,
    projector: Projector,
    lm: DecoderLm,
    stage: str,
    seed: int,
    extra_meta: dict | None = None,
) -> None:
    if lm.cfg.d_lm != projector.d_lm:
        raise DataError(
            f"projector output dim {projector.d_lm} does not match LM width {lm.cfg.d_lm}"
        )
    if encoder.dim != projector.d_enc:
        raise DataError(
            f"encoder dim {encoder.dim} does not match projector input dim {projector.d_enc}"
        )
    entries = _sections(encoder, projector, lm)
    meta = {
        "stage": stage,
        "seed": seed,
        "template_version": TEMPLATE_VERSION,
        "encoder": {
            "dim": encoder.dim,
            "vocab_hash_size": encoder.vocab_hash_size,
            "pooling": encoder.pooling,
            "seed": encoder.seed,
        },
        "projector": {
            "d_enc": projector.d_enc,
            "d_hidden": projector.d_hidden,
            "d_lm": projector.d_lm,
            "activation": projector.activation,
        },
        "lm": {
            "vocab_size": lm.cfg.vocab_size,
            "d_lm": lm.cfg.d_lm,
            "n_layers": lm.cfg.n_layers,
            "n_heads": lm.cfg.n_heads,
            "max_seq": lm.cfg.max_seq,
            "ln_eps": lm.cfg.ln_eps,
            "tie_vocab_head": lm.cfg.tie_vocab_head,
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    header = {
        "meta": meta,
        "arrays": [{"name": name, "shape": list(p.value.shape)} for name, p in entries],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, p in entries:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
        meta = header["meta"]
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise DataError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            )

    enc_meta = meta["encoder"]
    encoder = HashEncoder(
        dim=enc_meta["dim"],
        vocab_hash_size=enc_meta["vocab_hash_size"],
        pooling=enc_meta["pooling"],
        seed=enc_meta["seed"],
        table=arrays["encoder.table"],
    )
    proj_meta = meta["projector"]
    projector = Projector(
        d_enc=proj_meta["d_enc"],
        d_lm=proj_meta["d_lm"],
        d_hidden=proj_meta["d_hidden"],
        activation=proj_meta["activation"],
    )
    lm = DecoderLm(LmConfig(**meta["lm"]))
    for name, param in _sections(encoder, projector, lm):
        if name not in arrays:
            raise DataError(f"{path}: checkpoint missing array {name}")
        if arrays[name].shape != param.value.shape:
            raise DataError(
                f"{path}: array {name} has shape {arrays[name].shape}, "
                f"expected {param.value.shape}"
            )
        param.value[...] = arrays[name]
    return CheckpointBundle(encoder=encoder, projector=projector, lm=lm, meta=meta)
