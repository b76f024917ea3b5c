"""Compound prompts and the per-domain prompt encoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import DOMAINS, check_domain
from .layers import INIT_STD, SelfAttentionBlock, init_weights

LAYOUTS = ("label_end", "label_middle", "label_front")
LAYOUT_ALIASES = {"end": "label_end", "middle": "label_middle", "front": "label_front"}


def normalize_layout(layout: str) -> str:
    layout = LAYOUT_ALIASES.get(layout, layout)
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    return layout


class PromptSet(nn.Module):
    """Shared context tokens, per-domain context tokens and the label layout.

    With ``share_context=False`` each domain owns its own copy of the
    otherwise shared tokens (used by the no-separation ablation).
    """

    def __init__(self, d: int, m1: int = 5, m2: int = 5, layout: str = "label_end",
                 share_context: bool = True):
        super().__init__()
        self.d, self.m1, self.m2 = d, m1, m2
        self.layout = normalize_layout(layout)
        self.share_context = share_context
        if share_context:
            self.shared = nn.Parameter(torch.randn(m1, d) * INIT_STD)
        else:
            self.shared_by_domain = nn.ParameterDict(
                {dom: nn.Parameter(torch.randn(m1, d) * INIT_STD) for dom in DOMAINS}
            )
        self.specific = nn.ParameterDict(
            {dom: nn.Parameter(torch.randn(m2, d) * INIT_STD) for dom in DOMAINS}
        )

    @property
    def length(self) -> int:
        return self.m1 + self.m2 + 1

    def shared_tokens(self, domain: str) -> nn.Parameter:
        check_domain(domain)
        return self.shared if self.share_context else self.shared_by_domain[domain]

    def domain_parameters(self, domain: str) -> list[nn.Parameter]:
        """Tokens updated while training on ``domain``."""
        return [self.shared_tokens(domain), self.specific[domain]]

    def label_index(self) -> int:
        return {"label_end": self.m1 + self.m2, "label_middle": self.m1, "label_front": 0}[self.layout]

    def compose(self, labels: torch.Tensor, domain: str) -> torch.Tensor:
        """Stack prompts for a batch of label rows: (n, d) -> (n, m1 + m2 + 1, d)."""
        n = labels.shape[0]
        v = self.shared_tokens(domain).to(labels.dtype).unsqueeze(0).expand(n, -1, -1)
        s = self.specific[domain].to(labels.dtype).unsqueeze(0).expand(n, -1, -1)
        item = labels.unsqueeze(1)
        if self.layout == "label_end":
            parts = (v, s, item)
        elif self.layout == "label_middle":
            parts = (v, item, s)
        else:
            parts = (item, v, s)
        return torch.cat(parts, dim=1)


class PromptEncoder(nn.Module):
    """Unmasked attention blocks over prompt tokens followed by label-guided aggregation."""

    def __init__(self, d: int, length: int, blocks: int = 2, heads: int = 1,
                 dropout: float = 0.3, hidden: int | None = None, use_attention: bool = True,
                 use_positions: bool = True):
        super().__init__()
        self.d = d
        self.length = length
        self.use_attention = use_attention
        self.use_positions = use_positions
        self.pos_emb = nn.Parameter(torch.zeros(length, d))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(d, heads, dropout, causal=False) for _ in range(blocks)
        )
        hidden = hidden or d
        self.agg_hidden = nn.Linear(2 * d, hidden)
        self.agg_out = nn.Linear(hidden, 1)
        init_weights(self)
        if use_positions:
            nn.init.normal_(self.pos_emb, 0.0, INIT_STD)

    def encode(self, prompt: torch.Tensor, return_attention: bool = False):
        """Per-token outputs x for prompts of shape (n, length, d)."""
        if prompt.shape[-1] != self.d:
            raise ValueError(f"prompt width {prompt.shape[-1]} != encoder width {self.d}")
        x = prompt
        if self.use_positions:
            x = x + self.pos_emb[: prompt.shape[1]]
        attns = []
        for block in self.blocks:
            if return_attention:
                x, w = block(x, return_attention=True)
                attns.append(w)
            else:
                x = block(x)
        return (x, attns) if return_attention else x

    def token_scores(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Unnormalized weights w2 . relu(W1 [label ; x_i] + b1) + b2, shape (n, length)."""
        lab = labels.unsqueeze(1).expand(-1, x.shape[1], -1)
        return self.agg_out(F.relu(self.agg_hidden(torch.cat([lab, x], dim=-1)))).squeeze(-1)

    def token_weights(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if not self.use_attention:
            return torch.full(x.shape[:2], 1.0 / x.shape[1], dtype=x.dtype)
        return torch.softmax(self.token_scores(x, labels), dim=-1)

    def aggregate(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        gamma = self.token_weights(x, labels)
        return (gamma.unsqueeze(-1) * x).sum(1)

    def forward(self, prompt: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.aggregate(self.encode(prompt), labels)


def compose_prompt(item_id: int, domain: str, prompts: PromptSet, item_table: torch.Tensor,
                   id_range: range) -> torch.Tensor:
    if item_id not in id_range:
        raise ValueError(f"item {item_id} does not belong to domain {domain}")
    label = item_table[item_id].detach().unsqueeze(0)
    return prompts.compose(label, domain)[0]


def encode_prompt(prompt: torch.Tensor, encoder: PromptEncoder) -> torch.Tensor:
    return encoder.encode(prompt.unsqueeze(0))[0]


def aggregate_tokens(x: torch.Tensor, label_emb: torch.Tensor, encoder: PromptEncoder) -> torch.Tensor:
    return encoder.aggregate(x.unsqueeze(0), label_emb.unsqueeze(0))[0]


def prompt_vector(item_id: int, domain: str, prompts: PromptSet, encoder: PromptEncoder,
                  item_table: torch.Tensor, id_range: range) -> torch.Tensor:
    prompt = compose_prompt(item_id, domain, prompts, item_table, id_range)
    x = encode_prompt(prompt, encoder)
    return aggregate_tokens(x, item_table[item_id].detach(), encoder)
