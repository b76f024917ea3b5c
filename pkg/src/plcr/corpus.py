"""Interaction logs, k-core filtering, sequence building and splits."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, TextIO

logger = logging.getLogger(__name__)

DOMAINS = ("A", "B")
SPLIT_RATIOS = (0.75, 0.10, 0.15)


def check_domain(domain: str) -> str:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    return domain


@dataclass(frozen=True, order=True)
class Interaction:
    user: str
    timestamp: int
    item: str
    domain: str

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        check_domain(self.domain)


@dataclass
class InteractionLog:
    domain: str
    records: list[Interaction] = field(default_factory=list)
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def users(self) -> set[str]:
        return {r.user for r in self.records}

    def items(self) -> set[str]:
        return {r.item for r in self.records}


@dataclass(frozen=True)
class SequenceExample:
    prefix: tuple[int, ...]
    label: int
    domain: str

    def __post_init__(self):
        if not self.prefix:
            raise ValueError("empty prefix")


@dataclass
class DomainVocab:
    """Bijective external-id <-> internal-id maps with disjoint domain ranges.

    Domain A occupies ``[0, N_A)`` and domain B ``[N_A, N_A + N_B)``.
    """

    item_to_id: dict[str, dict[str, int]]
    id_to_item: dict[str, list[str]]

    @classmethod
    def from_logs(cls, log_a: InteractionLog, log_b: InteractionLog) -> "DomainVocab":
        item_to_id: dict[str, dict[str, int]] = {}
        id_to_item: dict[str, list[str]] = {}
        offset = 0
        for log in (log_a, log_b):
            items = sorted(log.items())
            item_to_id[log.domain] = {it: offset + i for i, it in enumerate(items)}
            id_to_item[log.domain] = items
            offset += len(items)
        return cls(item_to_id, id_to_item)

    @property
    def n_a(self) -> int:
        return len(self.id_to_item["A"])

    @property
    def n_b(self) -> int:
        return len(self.id_to_item["B"])

    @property
    def n_items(self) -> int:
        return self.n_a + self.n_b

    def offset(self, domain: str) -> int:
        return 0 if check_domain(domain) == "A" else self.n_a

    def size(self, domain: str) -> int:
        return self.n_a if check_domain(domain) == "A" else self.n_b

    def id_range(self, domain: str) -> range:
        start = self.offset(domain)
        return range(start, start + self.size(domain))

    def domain_of(self, item_id: int) -> str:
        if 0 <= item_id < self.n_a:
            return "A"
        if self.n_a <= item_id < self.n_items:
            return "B"
        raise ValueError(f"item id {item_id} outside vocabulary of {self.n_items}")

    def encode(self, domain: str, item: str) -> int:
        return self.item_to_id[domain][item]

    def decode(self, item_id: int) -> tuple[str, str]:
        domain = self.domain_of(item_id)
        return domain, self.id_to_item[domain][item_id - self.offset(domain)]

    def to_dict(self) -> dict:
        return {"A": self.id_to_item["A"], "B": self.id_to_item["B"]}

    @classmethod
    def from_dict(cls, data: dict) -> "DomainVocab":
        item_to_id, id_to_item, offset = {}, {}, 0
        for d in DOMAINS:
            items = list(data[d])
            item_to_id[d] = {it: offset + i for i, it in enumerate(items)}
            id_to_item[d] = items
            offset += len(items)
        return cls(item_to_id, id_to_item)


@dataclass
class DatasetSplit:
    train: list[SequenceExample]
    validation: list[SequenceExample]
    test: list[SequenceExample]
    seed: int

    def parts(self) -> dict[str, list[SequenceExample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def __len__(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)


def parse_log(stream: TextIO | Iterable[str], domain: str) -> InteractionLog:
    """Read ``user<TAB>item<TAB>timestamp`` lines; malformed lines are skipped and counted.

    User ids are namespaced by domain so the same raw user in both files
    stays two distinct users.
    """
    check_domain(domain)
    records = []
    malformed = 0
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            malformed += 1
            logger.warning("domain %s line %d: expected 3 tab-separated fields", domain, lineno)
            continue
        try:
            ts = int(parts[2])
        except ValueError:
            malformed += 1
            logger.warning("domain %s line %d: bad timestamp %r", domain, lineno, parts[2])
            continue
        if ts < 0:
            malformed += 1
            logger.warning("domain %s line %d: negative timestamp", domain, lineno)
            continue
        records.append(Interaction(f"{domain}:{parts[0]}", ts, parts[1], domain))
    records.sort(key=lambda r: (r.user, r.timestamp))
    return InteractionLog(domain, records, malformed)


def read_log(path, domain: str) -> InteractionLog:
    with open(path, encoding="utf-8") as fh:
        return parse_log(fh, domain)


def write_log(log: InteractionLog, path) -> None:
    prefix = f"{log.domain}:"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in log.records:
            user = r.user[len(prefix):] if r.user.startswith(prefix) else r.user
            fh.write(f"{user}\t{r.item}\t{r.timestamp}\n")


def kcore_filter(log: InteractionLog, k: int = 5, iterate: bool = True) -> InteractionLog:
    """Keep users with more than ``k`` interactions and items seen more than ``k`` times.

    Users and items are pruned alternately until nothing changes; with
    ``iterate=False`` a single user pass followed by a single item pass is done.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    records = list(log.records)
    while True:
        user_deg = Counter(r.user for r in records)
        kept = [r for r in records if user_deg[r.user] > k]
        item_deg = Counter(r.item for r in kept)
        kept = [r for r in kept if item_deg[r.item] > k]
        if not iterate or len(kept) == len(records):
            records = kept
            break
        records = kept
    return InteractionLog(log.domain, records, log.malformed)


def build_sequences(
    log: InteractionLog, vocab: DomainVocab, max_len: int
) -> tuple[list[SequenceExample], int]:
    """One example per user: the last interaction is the label, the rest the prefix.

    The prefix keeps the most recent ``max_len - 1`` items. Returns the
    examples (ordered by user id) and the number of users excluded for having
    fewer than two interactions.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    history: dict[str, list[Interaction]] = defaultdict(list)
    for r in log.records:
        history[r.user].append(r)
    examples = []
    excluded = 0
    for user in sorted(history):
        events = sorted(history[user], key=lambda r: r.timestamp)
        if len(events) < 2:
            excluded += 1
            continue
        ids = [vocab.encode(log.domain, r.item) for r in events]
        prefix = ids[:-1][-(max_len - 1):]
        examples.append(SequenceExample(tuple(prefix), ids[-1], log.domain))
    return examples, excluded


def split_sequences(
    examples: list[SequenceExample],
    ratios: tuple[float, float, float] = SPLIT_RATIOS,
    seed: int = 0,
    merge_validation: bool = False,
) -> DatasetSplit:
    """Shuffle under ``seed`` and cut into train/validation/test.

    Train and validation sizes are rounded to nearest; test takes the rest.
    With ``merge_validation`` the validation part is appended to test and the
    validation list is left empty.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(examples)
    if n < 3:
        raise ValueError(f"need at least 3 sequences to split, got {n}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    shuffled = [examples[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    if merge_validation:
        test = val + test
        val = []
    return DatasetSplit(train, val, test, seed)


def sequence_stats(log: InteractionLog, examples: list[SequenceExample]) -> dict:
    """Per-domain fields of the dataset statistics table."""
    lengths = Counter(r.user for r in log.records)
    n_users = len(lengths)
    return {
        "items": len(log.items()),
        "interactions": len(log.records),
        "avg_sequence_length": round(sum(lengths.values()) / n_users, 2) if n_users else 0.0,
        "sequences": len(examples),
    }


def dataset_statistics(
    logs: dict[str, InteractionLog],
    examples: dict[str, list[SequenceExample]],
    splits: dict[str, DatasetSplit],
) -> dict:
    report = {d: sequence_stats(logs[d], examples[d]) for d in DOMAINS}
    report["sequences"] = sum(len(examples[d]) for d in DOMAINS)
    report["train_sequences"] = sum(len(splits[d].train) for d in DOMAINS)
    report["test_sequences"] = sum(len(splits[d].test) for d in DOMAINS)
    report["val_sequences"] = sum(len(splits[d].validation) for d in DOMAINS)
    return report


def format_statistics(stats: dict) -> str:
    rows = [
        ("#Items", "items"),
        ("#Interactions", "interactions"),
        ("#Avg.sequence length", "avg_sequence_length"),
    ]
    lines = []
    for d in DOMAINS:
        lines.append(f"{d}-domain")
        for title, key in rows:
            value = stats[d][key]
            text = f"{value:.2f}" if isinstance(value, float) else f"{value:,}"
            lines.append(f"  {title:<22}{text:>12}")
    for title, key in (
        ("#Sequences", "sequences"),
        ("#Train-sequence", "train_sequences"),
        ("#Test-sequence", "test_sequences"),
        ("#Val-sequence", "val_sequences"),
    ):
        lines.append(f"{title:<24}{stats[key]:>12,}")
    return "\n".join(lines)


def write_manifest(splits: dict[str, DatasetSplit], path) -> None:
    """Line-delimited JSON, one record per sequence."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for domain in DOMAINS:
            for name, part in splits[domain].parts().items():
                for ex in part:
                    rec = {"domain": domain, "split": name, "items": list(ex.prefix), "label": ex.label}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path, seeds: dict[str, int] | None = None) -> dict[str, DatasetSplit]:
    parts: dict[str, dict[str, list[SequenceExample]]] = {
        d: {"train": [], "validation": [], "test": []} for d in DOMAINS
    }
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ex = SequenceExample(tuple(rec["items"]), int(rec["label"]), rec["domain"])
            parts[rec["domain"]][rec["split"]].append(ex)
    seeds = seeds or {}
    return {
        d: DatasetSplit(p["train"], p["validation"], p["test"], seeds.get(d, 0))
        for d, p in parts.items()
    }
