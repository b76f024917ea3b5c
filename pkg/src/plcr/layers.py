from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

INIT_STD = 0.02


def init_weights(module: nn.Module) -> None:
    """normal(0, 0.02) for embeddings and projections, zero biases, unit layer norms."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class SelfAttentionBlock(nn.Module):
    """Scaled dot-product self-attention, point-wise ReLU FFN, post-norm residuals.

    ``h = LN(x + Att(xW^Q, xW^K, xW^V))`` then ``out = LN(h + FFN(h))``.
    """

    def __init__(self, d: int, heads: int = 1, dropout: float = 0.0, causal: bool = True):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.causal = causal
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.ffn1 = nn.Linear(d, d)
        self.ffn2 = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d // self.heads).transpose(1, 2)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic weights of shape (batch, heads, n, n)."""
        q = self._split(self.w_q(x))
        k = self._split(self.w_k(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d // self.heads)
        if self.causal:
            n = x.shape[1]
            future = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        weights = self.attention_weights(x)
        v = self._split(self.w_v(x))
        s = (self.dropout(weights) @ v).transpose(1, 2).reshape(x.shape)
        h = self.norm1(x + self.dropout(s))
        f = self.ffn2(self.dropout(F.relu(self.ffn1(h))))
        out = self.norm2(h + self.dropout(f))
        if return_attention:
            return out, weights
        return out
