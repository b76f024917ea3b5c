"""The assembled recommender: frozen backbone(s), prompt tokens and per-domain prompt encoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone, pad_batch
from .corpus import DOMAINS, check_domain
from .prompt import PromptEncoder, PromptSet


@dataclass
class PromptConfig:
    m1: int = 5
    m2: int = 5
    layout: str = "label_end"
    blocks: int = 2
    heads: int = 1
    dropout: float = 0.3
    use_positions: bool = True
    # start both encoders from the same draw; they are still separate parameters
    tie_encoder_init: bool = True


@dataclass
class PLCR:
    backbones: dict[str, Backbone]
    id_ranges: dict[str, range]
    prompts: PromptSet
    encoders: nn.ModuleDict
    variant: str = "full"
    temperature: float = 1.0

    @property
    def d(self) -> int:
        return self.prompts.d

    def train(self, mode: bool = True) -> "PLCR":
        self.prompts.train(mode)
        self.encoders.train(mode)
        return self

    def eval(self) -> "PLCR":
        return self.train(False)

    def unique_backbones(self) -> list[Backbone]:
        seen, out = set(), []
        for d in DOMAINS:
            b = self.backbones[d]
            if id(b) not in seen:
                seen.add(id(b))
                out.append(b)
        return out

    def trainable_parameters(self, domain: str) -> list[nn.Parameter]:
        """Everything a training phase on ``domain`` may update."""
        return self.prompts.domain_parameters(domain) + list(self.encoders[domain].parameters())

    def all_trainable(self) -> list[nn.Parameter]:
        seen, out = set(), []
        for d in DOMAINS:
            for p in self.trainable_parameters(d):
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def label_rows(self, domain: str) -> torch.Tensor:
        r = self.id_ranges[check_domain(domain)]
        return self.backbones[domain].item_emb.weight[r.start:r.stop].detach()

    def prompt_vectors(self, domain: str) -> torch.Tensor:
        """Encoded prompt vector of every item of ``domain``, shape (N_domain, d)."""
        labels = self.label_rows(domain)
        prompt = self.prompts.compose(labels, domain)
        return self.encoders[domain](prompt, labels)

    def sequence_repr(self, prefixes: list[tuple[int, ...]], domain: str) -> torch.Tensor:
        backbone = self.backbones[check_domain(domain)]
        ids, lengths = pad_batch([p[-backbone.max_len:] for p in prefixes])
        with torch.no_grad():
            return backbone.sequence_repr(ids, lengths)

    def logits(self, prefixes: list[tuple[int, ...]], domain: str,
               vectors: torch.Tensor | None = None) -> torch.Tensor:
        """Dot products of prompt vectors with sequence representations, shape (batch, N_domain)."""
        if vectors is None:
            vectors = self.prompt_vectors(domain)
        return self.sequence_repr(prefixes, domain) @ vectors.T / self.temperature


def build_model(backbones: Backbone | dict[str, Backbone], id_ranges: dict[str, range],
                cfg: PromptConfig, seed: int = 0, variant: str = "full",
                share_context: bool = True, use_attention: bool = True) -> PLCR:
    if isinstance(backbones, Backbone):
        backbones = {d: backbones for d in DOMAINS}
    ref = backbones["A"]
    dtype = ref.item_emb.weight.dtype
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    prompts = PromptSet(ref.d, cfg.m1, cfg.m2, cfg.layout, share_context=share_context)
    encoders = {}
    init_state = None
    for d in DOMAINS:
        enc = PromptEncoder(ref.d, prompts.length, cfg.blocks, cfg.heads, cfg.dropout,
                            use_attention=use_attention, use_positions=cfg.use_positions)
        if cfg.tie_encoder_init:
            if init_state is None:
                init_state = {k: v.clone() for k, v in enc.state_dict().items()}
            else:
                enc.load_state_dict(init_state)
        encoders[d] = enc
    torch.random.set_rng_state(gen_state)
    model = PLCR(backbones, dict(id_ranges), prompts.to(dtype), nn.ModuleDict(encoders).to(dtype),
                 variant=variant)
    return model
