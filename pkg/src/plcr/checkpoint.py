"""Versioned binary checkpoints: magic, version, JSON header, raw little-endian blocks.

Layout::

    b"PLCRCKPT" | uint32 version | uint64 header length | header (UTF-8 JSON) | block bytes

The header lists every named block with dtype, shape, offset and length, a
frozen flag, the parameter checksum and free-form metadata. Nothing
time-dependent is written, so equal parameters give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, checksum
from .corpus import DOMAINS
from .model import PLCR, PromptConfig, build_model

MAGIC = b"PLCRCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_container(path, blocks: dict[str, torch.Tensor], header: dict) -> None:
    arrays = {name: t.detach().cpu().contiguous().numpy() for name, t in blocks.items()}
    entries, offset = [], 0
    for name in sorted(arrays):
        arr = arrays[name].astype(arrays[name].dtype.newbyteorder("<"), copy=False)
        arrays[name] = arr
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    head = json.dumps({**header, "blocks": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        for e in entries:
            fh.write(arrays[e["name"]].tobytes())


def read_container(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    blocks = {}
    for e in header.pop("blocks"):
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        blocks[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return blocks, header


def save_backbone(path, backbone: Backbone, meta: dict | None = None) -> None:
    header = {
        "kind": "backbone",
        "frozen": backbone.frozen,
        "checksum": checksum(backbone),
        "hparams": backbone.hparams(),
        "meta": meta or {},
    }
    write_container(path, backbone.state_dict(), header)


def load_backbone(path) -> tuple[Backbone, dict]:
    blocks, header = read_container(path)
    if header.get("kind") != "backbone":
        raise CheckpointError(f"{path}: expected a backbone checkpoint")
    backbone = Backbone(**header["hparams"])
    dtype = next(iter(blocks.values())).dtype
    backbone = backbone.to(dtype)
    backbone.load_state_dict(blocks)
    if checksum(backbone) != header["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    if header["frozen"]:
        backbone.freeze()
    return backbone, header


def save_prompts(path, model: PLCR, cfg: PromptConfig, meta: dict | None = None) -> None:
    blocks = {f"prompts.{k}": v for k, v in model.prompts.state_dict().items()}
    blocks.update({f"encoders.{k}": v for k, v in model.encoders.state_dict().items()})
    enc = model.encoders["A"]
    header = {
        "kind": "prompts",
        "frozen": False,
        "variant": model.variant,
        "layout": model.prompts.layout,
        "prompt_config": vars(cfg),
        "share_context": model.prompts.share_context,
        "use_attention": enc.use_attention,
        "backbone_checksums": {d: checksum(model.backbones[d]) for d in DOMAINS},
        "checksum": checksum(nn.ModuleDict({"p": model.prompts, "e": model.encoders})),
        "meta": meta or {},
    }
    write_container(path, blocks, header)


def load_prompts(path, backbones: Backbone | dict[str, Backbone]) -> tuple[PLCR, dict]:
    """Rebuild a trained model; refuses backbones other than the ones trained against."""
    blocks, header = read_container(path)
    if header.get("kind") != "prompts":
        raise CheckpointError(f"{path}: expected a prompt checkpoint")
    if isinstance(backbones, Backbone):
        backbones = {d: backbones for d in DOMAINS}
    for d in DOMAINS:
        got = checksum(backbones[d])
        if got != header["backbone_checksums"][d]:
            raise CheckpointError(
                f"{path}: backbone checksum mismatch for domain {d} "
                f"(trained against {header['backbone_checksums'][d][:12]}, got {got[:12]})"
            )
    cfg = PromptConfig(**header["prompt_config"])
    ref = backbones["A"]
    id_ranges = header["meta"].get("id_ranges")
    if id_ranges is None:
        raise CheckpointError(f"{path}: missing id ranges")
    ranges = {d: range(*id_ranges[d]) for d in DOMAINS}
    model = build_model(backbones, ranges, cfg, variant=header["variant"],
                        share_context=header["share_context"],
                        use_attention=header["use_attention"])
    model.prompts.load_state_dict({k[len("prompts."):]: v for k, v in blocks.items()
                                   if k.startswith("prompts.")})
    model.encoders.load_state_dict({k[len("encoders."):]: v for k, v in blocks.items()
                                    if k.startswith("encoders.")})
    model.prompts.to(ref.item_emb.weight.dtype)
    model.encoders.to(ref.item_emb.weight.dtype)
    model.eval()
    return model, header
