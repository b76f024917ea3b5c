"""Paired synthetic domains driven by shared latent interest clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Interaction, InteractionLog


@dataclass
class SynthConfig:
    n_clusters: int = 4
    users_per_domain: int = 500
    items_per_domain: int = 200
    min_len: int = 8
    max_len: int = 20
    p_in: float = 0.8
    # cluster_map[c] is the B-cluster paired with A-cluster c; None means identity
    cluster_map: tuple[int, ...] | None = None
    zipf_skew: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        g = self.n_clusters
        if g < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.items_per_domain % g:
            raise ValueError("items_per_domain must split evenly across clusters")
        if not 0.0 < self.p_in <= 1.0:
            raise ValueError("p_in must lie in (0, 1]")
        if self.p_in < 1.0 / g - 1e-12:
            raise ValueError(f"p_in={self.p_in} below chance level 1/{g}: no cluster signal")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        per = self.items_per_domain // g
        if self.max_len > per or (g > 1 and self.max_len > self.items_per_domain - per):
            raise ValueError("sequences are drawn without repeats; max_len exceeds a draw pool")
        if self.cluster_map is not None and sorted(self.cluster_map) != list(range(g)):
            raise ValueError("cluster_map must be a permutation of range(n_clusters)")
        if self.zipf_skew < 0:
            raise ValueError("zipf_skew must be >= 0")


def item_cluster(item_index: int, cfg: SynthConfig) -> int:
    """Cluster of the ``item_index``-th item of a domain (contiguous blocks)."""
    return item_index // (cfg.items_per_domain // cfg.n_clusters)


def _weights(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


def _gen_domain(
    cfg: SynthConfig, domain: str, user_clusters: np.ndarray, rng: np.random.Generator
) -> InteractionLog:
    n_items = cfg.items_per_domain
    per = n_items // cfg.n_clusters
    all_items = np.arange(n_items)
    records = []
    for u, cluster in enumerate(user_clusters):
        inside = all_items[cluster * per:(cluster + 1) * per]
        outside = np.concatenate([all_items[: cluster * per], all_items[(cluster + 1) * per:]])
        w_in = _weights(len(inside), cfg.zipf_skew)
        w_out = _weights(len(outside), cfg.zipf_skew) if len(outside) else None
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        seen: set[int] = set()
        for t in range(length):
            use_in = len(outside) == 0 or rng.random() < cfg.p_in
            pool, w = (inside, w_in) if use_in else (outside, w_out)
            # redraw from the same pool so the in-cluster rate stays p_in
            while True:
                item = int(pool[rng.choice(len(pool), p=w)])
                if item not in seen:
                    break
            seen.add(item)
            records.append(Interaction(f"{domain}:u{u}", t, f"{domain}i{item}", domain))
    records.sort(key=lambda r: (r.user, r.timestamp))
    return InteractionLog(domain, records, 0)


def gen_dual_domain(cfg: SynthConfig) -> tuple[InteractionLog, InteractionLog]:
    """Two logs with disjoint users/items whose users follow the same cluster model.

    Every user has one latent cluster; each interaction is an unseen item
    from that cluster with probability ``p_in``, otherwise an unseen item from
    the other clusters.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cmap = np.array(cfg.cluster_map if cfg.cluster_map is not None else range(cfg.n_clusters))
    a_clusters = rng.integers(0, cfg.n_clusters, cfg.users_per_domain)
    b_clusters = cmap[rng.integers(0, cfg.n_clusters, cfg.users_per_domain)]
    log_a = _gen_domain(cfg, "A", a_clusters, rng)
    log_b = _gen_domain(cfg, "B", b_clusters, rng)
    return log_a, log_b


def user_clusters(log: InteractionLog, cfg: SynthConfig) -> dict[str, list[int]]:
    """Cluster index of every item of every user, recovered from the item ids."""
    out: dict[str, list[int]] = {}
    for r in log.records:
        idx = int(r.item[len(log.domain) + 1:])
        out.setdefault(r.user, []).append(item_cluster(idx, cfg))
    return out
