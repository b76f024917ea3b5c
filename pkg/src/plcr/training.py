"""Prompt optimization with the shared-context separation schedule."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FrozenParamsError, NumericalError, block_checksums, first_differing_block
from .corpus import DOMAINS, DatasetSplit, SequenceExample
from .model import PLCR

logger = logging.getLogger(__name__)

SCHEDULES = ("epoch_interleaved", "sequential_two_stage")
SCHEDULE_ALIASES = {"interleaved": "epoch_interleaved", "sequential": "sequential_two_stage"}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 200
    schedule: str = "epoch_interleaved"
    seed: int = 0
    # 0 = exact softmax over the domain vocabulary
    sampled_negatives: int = 0
    select_best: bool = True

    def __post_init__(self):
        self.schedule = SCHEDULE_ALIASES.get(self.schedule, self.schedule)
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr >= 0, batch_size >= 1 and epochs >= 0 required")


@dataclass
class LossRecord:
    epoch: int
    phase: str
    loss: float
    grad_norm: float
    wall_time: float = 0.0
    val_hr10: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _labels(batch: list[SequenceExample], domain: str, model: PLCR) -> torch.Tensor:
    r = model.id_ranges[domain]
    for ex in batch:
        if ex.label not in r:
            raise ValueError(f"label {ex.label} is not a domain-{domain} item")
    return torch.tensor([ex.label - r.start for ex in batch])


def match_distribution(batch: list[SequenceExample], domain: str, model: PLCR) -> torch.Tensor:
    """p(y = k | S) over every item of ``domain``, one row per sequence."""
    logits = model.logits([ex.prefix for ex in batch], domain)
    if not torch.isfinite(logits).all():
        raise NumericalError(f"non-finite matching logits in domain {domain}")
    return torch.softmax(logits, dim=-1)


def domain_loss(batch: list[SequenceExample], domain: str, model: PLCR,
                sampled_negatives: int = 0, gen: torch.Generator | None = None) -> torch.Tensor:
    """Mean cross-entropy of the labels under the matching distribution."""
    if not batch:
        raise ValueError("empty batch")
    labels = _labels(batch, domain, model)
    if sampled_negatives:
        return _sampled_loss(batch, domain, model, labels, sampled_negatives, gen)
    logits = model.logits([ex.prefix for ex in batch], domain)
    if not torch.isfinite(logits).all():
        raise NumericalError(f"non-finite matching logits in domain {domain}")
    return F.cross_entropy(logits, labels)


def _sampled_loss(batch, domain, model, labels, n_neg, gen):
    # uniform candidate set shared by the batch, labels always included
    n = len(model.id_ranges[domain])
    cand = torch.randperm(n, generator=gen)[:n_neg]
    cand = torch.unique(torch.cat([labels, cand]))
    lab_rows = model.label_rows(domain)[cand]
    prompt = model.prompts.compose(lab_rows, domain)
    vectors = model.encoders[domain](prompt, lab_rows)
    logits = model.sequence_repr([ex.prefix for ex in batch], domain) @ vectors.T / model.temperature
    target = torch.searchsorted(cand, labels)
    return F.cross_entropy(logits, target)


def assert_frozen(before: dict[str, str], module: torch.nn.Module) -> None:
    """Fail naming the first parameter block whose checksum moved."""
    now = block_checksums(module)
    name = first_differing_block(before, now)
    if name is not None:
        raise FrozenParamsError(f"frozen parameters changed: first differing block {name!r}")


def frozen_checksums(model: PLCR) -> list[dict[str, str]]:
    return [block_checksums(b) for b in model.unique_backbones()]


def _batches(examples: list[SequenceExample], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(examples))
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i:i + batch_size]]


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return total ** 0.5


def validation_score(model: PLCR, splits: dict[str, DatasetSplit]) -> float | None:
    from .eval import domain_ranks

    if not all(splits[d].validation for d in DOMAINS):
        return None
    total = 0.0
    for d in DOMAINS:
        ranks = domain_ranks(model, splits[d].validation, d)
        total += float((ranks <= 10).double().mean())
    return total


def _trainable_state(model: PLCR) -> dict:
    return {
        "prompts": copy.deepcopy(model.prompts.state_dict()),
        "encoders": copy.deepcopy(model.encoders.state_dict()),
    }


def _load_trainable(model: PLCR, state: dict) -> None:
    model.prompts.load_state_dict(state["prompts"])
    model.encoders.load_state_dict(state["encoders"])


def run_phase(model: PLCR, domain: str, examples: list[SequenceExample], cfg: TrainConfig,
              rng: np.random.Generator, gen: torch.Generator, epoch: int, t0: float) -> LossRecord:
    """One pass of SGD over ``examples`` touching only ``domain``'s trainables."""
    params = model.trainable_parameters(domain)
    opt = torch.optim.SGD(params, lr=cfg.lr)
    model.train()
    losses, norms = [], []
    for batch in _batches(examples, cfg.batch_size, rng):
        loss = domain_loss(batch, domain, model, cfg.sampled_negatives, gen)
        if not torch.isfinite(loss):
            rec = LossRecord(epoch, domain, float(loss), float("nan"), time.perf_counter() - t0)
            raise NumericalError(f"non-finite loss; last record {rec.to_json()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        norms.append(_grad_norm(params))
        opt.step()
        losses.append(float(loss.detach()))
    return LossRecord(epoch, domain, float(np.mean(losses)), float(np.mean(norms)),
                      time.perf_counter() - t0)


def train_prompts(cfg: TrainConfig, splits: dict[str, DatasetSplit], model: PLCR,
                  log_path=None) -> tuple[PLCR, list[LossRecord]]:
    """Optimise prompt tokens and encoders; the backbone stays frozen throughout.

    ``epoch_interleaved`` runs a domain-A phase then a domain-B phase in every
    epoch; ``sequential_two_stage`` runs all epochs on A, then all on B.
    The shared tokens are updated by both domains' phases.
    """
    for b in model.unique_backbones():
        if not b.frozen:
            raise FrozenParamsError("backbone must be frozen before prompt training")
    for d in DOMAINS:
        if not splits[d].train:
            raise ValueError(f"domain {d} has no training sequences")
    before = frozen_checksums(model)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)

    if cfg.schedule == "epoch_interleaved":
        plan = [(e, d) for e in range(1, cfg.epochs + 1) for d in DOMAINS]
    else:
        plan = [(e, d) for d in DOMAINS for e in range(1, cfg.epochs + 1)]

    records: list[LossRecord] = []
    best_score, best_state = None, None
    t0 = time.perf_counter()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for i, (epoch, domain) in enumerate(plan):
            rec = run_phase(model, domain, splits[domain].train, cfg, rng, gen, epoch, t0)
            # select after the last phase of each epoch (interleaved) or each stage epoch
            closes = cfg.schedule != "epoch_interleaved" or domain == DOMAINS[-1]
            if cfg.select_best and closes:
                score = validation_score(model, splits)
                rec.val_hr10 = score
                if score is not None and (best_score is None or score > best_score):
                    best_score, best_state = score, _trainable_state(model)
            records.append(rec)
            if log_fh:
                log_fh.write(rec.to_json() + "\n")
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        _load_trainable(model, best_state)
    model.eval()
    for b, ref in zip(model.unique_backbones(), before):
        assert_frozen(ref, b)
    return model, records


@torch.no_grad()
def mean_loss(model: PLCR, examples: list[SequenceExample], domain: str,
              batch_size: int = 512) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        total += float(domain_loss(chunk, domain, model)) * len(chunk)
    return total / len(examples)
