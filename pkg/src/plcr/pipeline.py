"""End-to-end stages shared by the CLI, the ablation runner and the acceptance suite."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass

import torch

from .backbone import Backbone, BackboneConfig, pretrain_joint
from .corpus import (
    DOMAINS,
    DatasetSplit,
    DomainVocab,
    InteractionLog,
    SequenceExample,
    build_sequences,
    dataset_statistics,
    kcore_filter,
    split_sequences,
)
from .eval import MetricsReport, build_variant, evaluate
from .model import PLCR, PromptConfig, build_model
from .training import LossRecord, TrainConfig, train_prompts

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    vocab: DomainVocab
    logs: dict[str, InteractionLog]
    examples: dict[str, list[SequenceExample]]
    splits: dict[str, DatasetSplit]

    @property
    def id_ranges(self) -> dict[str, range]:
        return {d: self.vocab.id_range(d) for d in DOMAINS}

    def statistics(self) -> dict:
        return dataset_statistics(self.logs, self.examples, self.splits)

    def test_parts(self) -> dict[str, list[SequenceExample]]:
        return {d: self.splits[d].test for d in DOMAINS}

    def validation_parts(self) -> dict[str, list[SequenceExample]]:
        return {d: self.splits[d].validation for d in DOMAINS}


def prepare_dataset(log_a: InteractionLog, log_b: InteractionLog, k: int = 5, max_len: int = 77,
                    seed: int = 0, merge_validation: bool = False, iterate_kcore: bool = True,
                    train_fraction: dict[str, float] | None = None) -> Dataset:
    """k-core filter, index, build sequences and split both domains.

    ``train_fraction`` keeps only a seeded subset of a domain's training
    sequences (for data-scarcity experiments); held-out parts are untouched.
    """
    logs = {"A": kcore_filter(log_a, k, iterate_kcore), "B": kcore_filter(log_b, k, iterate_kcore)}
    vocab = DomainVocab.from_logs(logs["A"], logs["B"])
    examples, splits = {}, {}
    for i, d in enumerate(DOMAINS):
        examples[d], excluded = build_sequences(logs[d], vocab, max_len)
        if excluded:
            logger.info("domain %s: %d users with < 2 interactions excluded", d, excluded)
        split = split_sequences(examples[d], seed=seed + i, merge_validation=merge_validation)
        frac = (train_fraction or {}).get(d, 1.0)
        if frac < 1.0:
            keep = max(1, int(round(len(split.train) * frac)))
            split.train = random.Random(seed + 17 + i).sample(split.train, keep)
        splits[d] = split
    return Dataset(vocab, logs, examples, splits)


def pretrain_backbone(data: Dataset, cfg: BackboneConfig, domains=DOMAINS,
                      dtype: torch.dtype = torch.float32) -> Backbone:
    return pretrain_joint(data.splits, data.id_ranges, data.vocab.n_items, cfg,
                          domains=tuple(domains), dtype=dtype)


def single_backbones(data: Dataset, cfg: BackboneConfig,
                     dtype: torch.dtype = torch.float32) -> dict[str, Backbone]:
    return {d: pretrain_backbone(data, cfg, (d,), dtype) for d in DOMAINS}


def run_variant(tag: str, data: Dataset, backbone: Backbone, prompt_cfg: PromptConfig,
                train_cfg: TrainConfig, singles: dict[str, Backbone] | None = None,
                fingerprint: str = "", dataset_name: str = "") -> tuple[PLCR, MetricsReport, list[LossRecord]]:
    base = build_model(backbone, data.id_ranges, prompt_cfg, seed=train_cfg.seed)
    model = build_variant(tag, base, prompt_cfg, seed=train_cfg.seed, single_backbones=singles)
    model, records = train_prompts(train_cfg, data.splits, model)
    report = evaluate(data.test_parts(), model, tag, seed=train_cfg.seed,
                      fingerprint=fingerprint, dataset=dataset_name)
    return model, report, records
