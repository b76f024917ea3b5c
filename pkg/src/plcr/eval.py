"""Full-ranking HR@K / NDCG@K evaluation and ablation variants."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import torch

from .corpus import DOMAINS, SequenceExample
from .model import PLCR, PromptConfig, build_model

KS = (10, 20)
VARIANTS = ("full", "no_specific", "no_independent", "no_separation", "no_attention", "single_backbone")
VARIANT_TITLES = {
    "full": "PLCR",
    "no_specific": "PLCR (no specific)",
    "no_independent": "PLCR (no independent)",
    "no_separation": "PLCR (no separation)",
    "no_attention": "PLCR (no attention)",
    "single_backbone": "PLCR (single)",
}


def hr_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    # one relevant item, so the ideal DCG is 1
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def rank_items(scores: torch.Tensor, id_range: range) -> list[int]:
    """Domain item ids by descending score, ties by ascending id."""
    s = scores.tolist()
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return [id_range.start + i for i in order]


def label_ranks(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """1-based rank of each row's label under the descending-score, ascending-id order."""
    target = scores.gather(1, labels.unsqueeze(1))
    idx = torch.arange(scores.shape[1]).unsqueeze(0)
    ahead = (scores > target) | ((scores == target) & (idx < labels.unsqueeze(1)))
    return 1 + ahead.sum(1)


@dataclass
class MetricsReport:
    metrics: dict[str, dict[str, float]]  # domain -> {"HR@10": ..., ...}
    counts: dict[str, int]
    variant: str = "full"
    fingerprint: str = ""
    seed: int = 0
    dataset: str = ""

    def value(self, domain: str, metric: str, k: int) -> float:
        return self.metrics[domain][f"{metric}@{k}"]

    def percent(self) -> dict[str, dict[str, float]]:
        return {d: {m: round(100 * v, 2) for m, v in ms.items()} for d, ms in self.metrics.items()}

    def rows(self) -> list[dict]:
        out = []
        for d in sorted(self.metrics):
            for metric in ("HR", "NDCG"):
                for k in KS:
                    out.append({
                        "dataset": self.dataset, "domain": d, "variant": self.variant,
                        "metric": metric, "K": k, "value": self.value(d, metric, k),
                        "seed": self.seed,
                    })
        return out

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["dataset", "domain", "variant", "metric", "K", "value", "seed"],
                           lineterminator="\n")
        if header:
            w.writeheader()
        for row in self.rows():
            w.writerow({**row, "value": repr(row["value"])})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics, "counts": self.counts, "variant": self.variant,
            "fingerprint": self.fingerprint, "seed": self.seed, "dataset": self.dataset,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)


def format_table(reports: list[MetricsReport]) -> str:
    """Percent table with HR/NDCG at 10 and 20 per domain, one row per variant."""
    domains = sorted({d for r in reports for d in r.metrics})
    cols = [(d, m, k) for d in domains for m in ("HR", "NDCG") for k in KS]
    head = f"{'Method':<24}" + "".join(f"{f'{d}:{m}@{k}':>11}" for d, m, k in cols)
    lines = [head, "-" * len(head)]
    for r in reports:
        title = VARIANT_TITLES.get(r.variant, r.variant)
        lines.append(f"{title:<24}" + "".join(
            f"{100 * r.value(d, m, k):>11.2f}" for d, m, k in cols))
    return "\n".join(lines)


@torch.no_grad()
def domain_ranks(model: PLCR, examples: list[SequenceExample], domain: str,
                 batch_size: int = 512) -> torch.Tensor:
    model.eval()
    r = model.id_ranges[domain]
    vectors = model.prompt_vectors(domain)
    ranks = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        scores = model.logits([ex.prefix for ex in chunk], domain, vectors)
        labels = torch.tensor([ex.label - r.start for ex in chunk])
        ranks.append(label_ranks(scores, labels))
    return torch.cat(ranks) if ranks else torch.zeros(0, dtype=torch.long)


def metrics_from_ranks(ranks: list[int]) -> dict[str, float]:
    n = len(ranks)
    out = {}
    for k in KS:
        out[f"HR@{k}"] = sum(hr_at_k(r, k) for r in ranks) / n if n else 0.0
        out[f"NDCG@{k}"] = sum(ndcg_at_k(r, k) for r in ranks) / n if n else 0.0
    return out


def evaluate(parts: dict[str, list[SequenceExample]], model: PLCR, variant: str | None = None,
             seed: int = 0, fingerprint: str = "", dataset: str = "") -> MetricsReport:
    """Mean per-sequence metrics for each domain present in ``parts``."""
    metrics, counts = {}, {}
    for d in DOMAINS:
        examples = parts.get(d) or []
        if not examples:
            continue
        ranks = domain_ranks(model, examples, d).tolist()
        metrics[d] = metrics_from_ranks(ranks)
        counts[d] = len(ranks)
    if not metrics:
        raise ValueError("nothing to evaluate")
    return MetricsReport(metrics, counts, variant or model.variant, fingerprint, seed, dataset)


def variant_structure(tag: str, cfg: PromptConfig) -> dict:
    """Prompt-side settings that realise an ablation."""
    if tag not in VARIANTS:
        raise ValueError(f"unknown variant {tag!r}; expected one of {VARIANTS}")
    pcfg = PromptConfig(**vars(cfg))
    share_context, use_attention = True, True
    if tag == "no_specific":
        pcfg.m2 = 0
    elif tag == "no_independent":
        pcfg.m1 = 0
    elif tag == "no_separation":
        share_context = False
    elif tag == "no_attention":
        use_attention = False
    return {"cfg": pcfg, "share_context": share_context, "use_attention": use_attention}


def build_variant(tag: str, model: PLCR, cfg: PromptConfig, seed: int = 0,
                  single_backbones: dict | None = None) -> PLCR:
    """Fresh untrained model of the given variant on top of ``model``'s backbone.

    ``single_backbone`` needs one backbone per domain, each pre-trained on
    that domain alone.
    """
    structure = variant_structure(tag, cfg)
    backbones = model.backbones
    if tag == "single_backbone":
        if single_backbones is None:
            raise ValueError("single_backbone variant needs per-domain backbones")
        backbones = dict(single_backbones)
    return build_model(backbones, model.id_ranges, structure["cfg"], seed=seed, variant=tag,
                       share_context=structure["share_context"], use_attention=structure["use_attention"])
