"""Self-attentive sequence encoder and item table, pre-trained on both domains then frozen."""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .corpus import DOMAINS, DatasetSplit, SequenceExample
from .layers import SelfAttentionBlock, init_weights

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or logit becomes non-finite."""


class FrozenParamsError(RuntimeError):
    pass


@dataclass
class BackboneConfig:
    d: int = 50
    blocks: int = 2
    heads: int = 1
    max_len: int = 77
    dropout: float = 0.2
    optimizer: str = "sgd"
    lr: float = 0.1
    epochs: int = 200
    batch_size: int = 128
    patience: int = 20
    seed: int = 0


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (length, d)
    repr: torch.Tensor  # (d,)


@dataclass
class PretrainRecord:
    epoch: int
    loss: float
    val_hr10: float | None = None
    wall_time: float = 0.0


class Backbone(nn.Module):
    """Item embedding table over the unified vocabulary plus causal attention blocks."""

    def __init__(self, n_items: int, d: int = 50, max_len: int = 77, blocks: int = 2,
                 heads: int = 1, dropout: float = 0.2):
        super().__init__()
        self.n_items = n_items
        self.d = d
        self.max_len = max_len
        self.item_emb = nn.Embedding(n_items, d)
        self.pos_emb = nn.Embedding(max_len, d)
        self.emb_dropout = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(d, heads, dropout, causal=True) for _ in range(blocks)
        )
        init_weights(self)
        self.frozen = False
        self.freeze_checksum: str | None = None

    @classmethod
    def from_config(cls, n_items: int, cfg: BackboneConfig) -> "Backbone":
        return cls(n_items, cfg.d, cfg.max_len, cfg.blocks, cfg.heads, cfg.dropout)

    def hparams(self) -> dict:
        return {
            "n_items": self.n_items, "d": self.d, "max_len": self.max_len,
            "blocks": len(self.blocks), "heads": self.blocks[0].heads if self.blocks else 1,
            "dropout": self.emb_dropout.p,
        }

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.n_items):
            raise ValueError(f"item id out of range [0, {self.n_items})")
        if ids.shape[-1] > self.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {self.max_len}")
        pos = torch.arange(ids.shape[-1], device=ids.device)
        return self.emb_dropout(self.item_emb(ids) + self.pos_emb(pos))

    def forward(self, ids: torch.Tensor, return_attention: bool = False):
        """Hidden states (batch, length, d) for right-padded id batches."""
        x = self.embed(ids)
        attns = []
        for block in self.blocks:
            if return_attention:
                x, w = block(x, return_attention=True)
                attns.append(w)
            else:
                x = block(x)
        return (x, attns) if return_attention else x

    def sequence_repr(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        hidden = self(ids)
        return hidden[torch.arange(ids.shape[0]), lengths - 1]

    def encode(self, prefix) -> EncoderOutput:
        ids = torch.as_tensor(list(prefix), dtype=torch.long).unsqueeze(0)
        hidden = self(ids)[0]
        return EncoderOutput(hidden, hidden[-1])

    def domain_scores(self, seq_repr: torch.Tensor, id_range: range) -> torch.Tensor:
        table = self.item_emb.weight[id_range.start:id_range.stop]
        return seq_repr @ table.T

    def freeze(self) -> str:
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.eval()
        self.frozen = True
        self.freeze_checksum = checksum(self)
        return self.freeze_checksum

    def train(self, mode: bool = True):
        # a frozen backbone never re-enables dropout
        return super().train(mode and not getattr(self, "frozen", False))


def embed_sequence(prefix, backbone: Backbone) -> torch.Tensor:
    ids = torch.as_tensor(list(prefix), dtype=torch.long).unsqueeze(0)
    return backbone.embed(ids)[0]


def encode_sequence(prefix, backbone: Backbone) -> EncoderOutput:
    return backbone.encode(prefix)


def score_next(seq_repr: torch.Tensor, item_id: int, backbone: Backbone) -> torch.Tensor:
    return seq_repr @ backbone.item_emb.weight[item_id]


def block_checksums(module: nn.Module) -> dict[str, str]:
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        h = hashlib.sha256()
        h.update(f"{name}|{arr.dtype.str}|{arr.shape}|".encode())
        h.update(arr.tobytes())
        out[name] = h.hexdigest()
    return out


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, digest in sorted(block_checksums(module).items()):
        h.update(f"{name}={digest};".encode())
    return h.hexdigest()


def first_differing_block(a: dict[str, str], b: dict[str, str]) -> str | None:
    for name in sorted(set(a) | set(b)):
        if a.get(name) != b.get(name):
            return name
    return None


def pad_batch(seqs: list[tuple[int, ...]], fill: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad with ``fill``; causal masking keeps pads invisible to real positions."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    ids = torch.full((len(seqs), int(lengths.max())), fill, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return ids, lengths


def bce_loss(pos_logits: torch.Tensor, neg_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid steps of ``-log sigma(pos) - log(1 - sigma(neg))``."""
    per_step = -nn.functional.logsigmoid(pos_logits) - nn.functional.logsigmoid(-neg_logits)
    mask = mask.to(per_step.dtype)
    return (per_step * mask).sum() / mask.sum()


def sample_negatives(full: torch.Tensor, id_ranges: list[range], gen: torch.Generator) -> torch.Tensor:
    """One uniform negative per step from each row's own domain, avoiding the row's items."""
    b, n = full.shape
    lo = torch.tensor([r.start for r in id_ranges], dtype=torch.long).unsqueeze(1)
    size = torch.tensor([len(r) for r in id_ranges], dtype=torch.long).unsqueeze(1)
    neg = lo + (torch.rand(b, n, generator=gen) * size).long()
    for _ in range(1000):
        clash = (neg.unsqueeze(-1) == full.unsqueeze(1)).any(-1)
        if not clash.any():
            return neg
        redraw = lo + (torch.rand(b, n, generator=gen) * size).long()
        neg = torch.where(clash, redraw, neg)
    raise RuntimeError("could not draw negatives outside the sequence; domain too small")


def training_rows(examples: list[SequenceExample], max_len: int) -> list[tuple[int, ...]]:
    """Full sequences (prefix + label) truncated to ``max_len`` most recent items."""
    rows = []
    for ex in examples:
        full = (*ex.prefix, ex.label)[-max_len:]
        if len(full) >= 2:
            rows.append(full)
    return rows


def pretrain_batch_loss(backbone: Backbone, full_rows: list[tuple[int, ...]],
                        id_ranges: list[range], gen: torch.Generator) -> torch.Tensor:
    full, lengths = pad_batch(full_rows, fill=-1)
    neg = sample_negatives(full, id_ranges, gen)[:, 1:]
    full = full.clamp(min=0)
    inputs, targets = full[:, :-1], full[:, 1:]
    mask = torch.arange(inputs.shape[1]).unsqueeze(0) < (lengths - 1).unsqueeze(1)
    hidden = backbone(inputs)
    table = backbone.item_emb.weight
    pos_logits = (hidden * table[targets]).sum(-1)
    neg_logits = (hidden * table[neg]).sum(-1)
    return bce_loss(pos_logits, neg_logits, mask)


@torch.no_grad()
def backbone_hit_rate(backbone: Backbone, examples: list[SequenceExample],
                      id_range: range, k: int = 10, batch_size: int = 512) -> float:
    """Full-ranking HR@k of the backbone's own item-table scorer."""
    if not examples:
        return 0.0
    was_training = backbone.training
    backbone.eval()
    hits = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        ids, lengths = pad_batch([ex.prefix[-backbone.max_len:] for ex in chunk])
        scores = backbone.domain_scores(backbone.sequence_repr(ids, lengths), id_range)
        labels = torch.tensor([ex.label - id_range.start for ex in chunk])
        target = scores[torch.arange(len(chunk)), labels].unsqueeze(1)
        idx = torch.arange(scores.shape[1]).unsqueeze(0)
        rank = 1 + (scores > target).sum(1) + ((scores == target) & (idx < labels.unsqueeze(1))).sum(1)
        hits += int((rank <= k).sum())
    backbone.train(was_training)
    return hits / len(examples)


def pretrain_joint(
    splits: dict[str, DatasetSplit],
    id_ranges: dict[str, range],
    n_items: int,
    cfg: BackboneConfig,
    domains: tuple[str, ...] = DOMAINS,
    dtype: torch.dtype = torch.float32,
    history: list[PretrainRecord] | None = None,
) -> Backbone:
    """Train one backbone on mixed mini-batches from ``domains`` and freeze it.

    Negatives come from each sequence's own domain. Keeps the epoch with the
    best summed validation HR@10 when validation data exist.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    backbone = Backbone.from_config(n_items, cfg).to(dtype)
    rows, row_ranges = [], []
    for d in domains:
        r = training_rows(splits[d].train, cfg.max_len)
        if not r:
            raise ValueError(f"domain {d} has no usable training sequences")
        rows += r
        row_ranges += [id_ranges[d]] * len(r)
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(backbone.parameters(), lr=cfg.lr)
    elif cfg.optimizer == "adam":
        opt = torch.optim.Adam(backbone.parameters(), lr=cfg.lr, betas=(0.9, 0.98))
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")

    has_val = all(splits[d].validation for d in domains)
    best_score, best_state, stale = -1.0, None, 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        backbone.train()
        order = rng.permutation(len(rows))
        total, batches = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = pretrain_batch_loss(backbone, [rows[j] for j in idx],
                                       [row_ranges[j] for j in idx], gen)
            if not torch.isfinite(loss):
                raise NumericalError(f"pre-training loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        rec = PretrainRecord(epoch, total / batches, wall_time=time.perf_counter() - t0)
        if has_val:
            rec.val_hr10 = sum(
                backbone_hit_rate(backbone, splits[d].validation, id_ranges[d]) for d in domains
            )
            if rec.val_hr10 > best_score:
                best_score, best_state, stale = rec.val_hr10, copy.deepcopy(backbone.state_dict()), 0
            else:
                stale += 1
        if history is not None:
            history.append(rec)
        logger.debug("pretrain epoch %d loss %.4f val %s", epoch, rec.loss, rec.val_hr10)
        if has_val and cfg.patience and stale >= cfg.patience:
            break
    if best_state is not None:
        backbone.load_state_dict(best_state)
    backbone.freeze()
    return backbone
