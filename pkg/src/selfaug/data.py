"""Corpus handling: JSONL loading, tokenization, vocabulary, batching,
deterministic splits, and a seeded synthetic corpus generator.

Three task kinds flow through the same types: binary and multiclass examples
carry exactly one label, multilabel examples carry one or more.  Everything
that shuffles or samples takes an explicit seed and is reproducible bit for
bit.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .seeding import rng_for

TASK_KINDS = ("binary", "multiclass", "multilabel")

PAD, UNK, CLS = 0, 1, 2
RESERVED_TOKENS = ("<pad>", "<unk>", "<cls>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]+", re.UNICODE)


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    labels: tuple[str, ...]


@dataclass(frozen=True)
class LabelSpace:
    task_kind: str
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if len(self.labels) != len(set(self.labels)):
            raise ConfigError("label space contains duplicate labels")
        if self.task_kind == "binary" and len(self.labels) != 2:
            raise ConfigError("binary task needs exactly 2 labels, "
                              f"got {len(self.labels)}")
        if len(self.labels) < 2:
            raise ConfigError("label space needs at least 2 labels")

    def index_of(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"label {label!r} not in label space") from None

    @property
    def single_label(self) -> bool:
        return self.task_kind in ("binary", "multiclass")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace; punctuation runs become their
    own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token/id mapping with three reserved ids: PAD=0, UNK=1, CLS=2."""

    def __init__(self, content_tokens: Sequence[str]) -> None:
        self.id_to_token: list[str] = list(RESERVED_TOKENS) + list(content_tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Content tokens for `ids`, dropping PAD and CLS; UNK maps to its
        marker string, so decode(encode(x)) recovers the kept tokens modulo
        UNK substitutions."""
        return [self.id_to_token[i] for i in ids if i not in (PAD, CLS)]


def build_vocab(examples: Sequence[Example], min_freq: int = 1,
                max_size: int | None = None) -> Vocabulary:
    """Frequency-sorted vocabulary over the tokenized texts.

    Tokens below `min_freq` are dropped; ties break lexicographically so the
    result is independent of corpus order.  `max_size` caps the total size
    including the three reserved ids.
    """
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    if max_size is not None and max_size < len(RESERVED_TOKENS) + 1:
        raise ConfigError(f"max_size must leave room for at least one "
                          f"content token, got {max_size}")
    counts: Counter[str] = Counter()
    for ex in examples:
        counts.update(tokenize(ex.text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max_size - len(RESERVED_TOKENS)]
    return Vocabulary(kept)


def encode(text: str, vocab: Vocabulary,
           max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] + token ids, truncated to max_seq_len and padded with PAD.

    Returns (ids, mask) as int64/float64 arrays of length max_seq_len; the
    mask is 1 over CLS and real tokens, 0 over padding.
    """
    if max_seq_len < 2:
        raise ConfigError(f"max_seq_len must be >= 2, got {max_seq_len}")
    ids = [CLS] + [vocab.id_of(t) for t in tokenize(text)]
    ids = ids[:max_seq_len]
    n = len(ids)
    out = np.full(max_seq_len, PAD, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(max_seq_len, dtype=np.float64)
    mask[:n] = 1.0
    return out, mask


# ---------------------------------------------------------------------------
# dataset files


def load_label_space(path: str | Path) -> LabelSpace:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read label space {path}: {err}") from err
    if not isinstance(raw, dict) or "task_kind" not in raw or "labels" not in raw:
        raise DataError(f"label space {path} needs 'task_kind' and 'labels'")
    return LabelSpace(task_kind=raw["task_kind"], labels=tuple(raw["labels"]))


def load_jsonl(path: str | Path, label_space: LabelSpace) -> list[Example]:
    """One JSON object per line with fields id, text, labels.

    Errors carry the 1-based line number; labels are validated against the
    label space; duplicate ids and label counts inconsistent with the task
    kind are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    examples: list[Example] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: invalid JSON: {err.msg}") from err
            for key in ("id", "text", "labels"):
                if key not in raw:
                    raise DataError(f"{path}:{lineno}: missing field {key!r}")
            labels = raw["labels"]
            if not isinstance(labels, list) or not labels:
                raise DataError(f"{path}:{lineno}: 'labels' must be a "
                                f"non-empty list")
            for label in labels:
                if label not in label_space.labels:
                    raise DataError(f"{path}:{lineno}: unknown label "
                                    f"{label!r}")
            if label_space.single_label and len(labels) != 1:
                raise DataError(f"{path}:{lineno}: {label_space.task_kind} "
                                f"task requires exactly one label, "
                                f"got {len(labels)}")
            ex_id = str(raw["id"])
            if ex_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ex_id!r}")
            seen.add(ex_id)
            examples.append(Example(id=ex_id, text=str(raw["text"]),
                                    labels=tuple(labels)))
    return examples


def write_jsonl(path: str | Path, examples: Sequence[Example]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"id": ex.id, "text": ex.text,
                                 "labels": list(ex.labels)},
                                sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# splits


@dataclass
class Splits:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    stratified: bool


@dataclass
class Folds:
    folds: list[list[Example]]
    stratified: bool


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    quotas = [total * r for r in ratios]
    sizes = [int(q) for q in quotas]
    remainders = sorted(range(len(ratios)),
                        key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in remainders[:total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def _by_class(examples: Sequence[Example]) -> dict[str, list[Example]]:
    # first label is the stratification key for multilabel examples
    groups: dict[str, list[Example]] = {}
    for ex in examples:
        groups.setdefault(ex.labels[0], []).append(ex)
    return dict(sorted(groups.items()))


def make_splits(examples: Sequence[Example], ratios: Sequence[float],
                seed: int) -> Splits:
    """Deterministic train/val/test partition with exact largest-remainder
    sizes, stratified by (first) label when every class has at least as many
    members as there are parts; otherwise unstratified with a warning flag.
    """
    if len(ratios) != 3:
        raise ConfigError(f"expected 3 split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, "
                          f"got {list(ratios)}")
    if not examples:
        raise ConfigError("cannot split an empty example list")
    rng = rng_for(seed, "split")
    targets = _largest_remainder(len(examples), ratios)
    groups = _by_class(examples)
    stratified = all(len(g) >= 3 for g in groups.values())
    parts: list[list[Example]] = [[], [], []]
    if not stratified:
        order = rng.permutation(len(examples))
        shuffled = [examples[i] for i in order]
        start = 0
        for part, size in zip(parts, targets):
            part.extend(shuffled[start:start + size])
            start += size
        return Splits(*parts, stratified=False)
    # per-class largest-remainder quotas, then a global fix-up so the part
    # sizes land exactly on the targets
    quotas: dict[str, list[int]] = {}
    for label, members in groups.items():
        quotas[label] = _largest_remainder(len(members), ratios)
    totals = [sum(q[i] for q in quotas.values()) for i in range(3)]
    while totals != targets:
        over = next(i for i in range(3) if totals[i] > targets[i])
        under = next(i for i in range(3) if totals[i] < targets[i])
        donor = max(quotas, key=lambda lbl: quotas[lbl][over])
        quotas[donor][over] -= 1
        quotas[donor][under] += 1
        totals[over] -= 1
        totals[under] += 1
    for label, members in groups.items():
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        start = 0
        for part, size in zip(parts, quotas[label]):
            part.extend(shuffled[start:start + size])
            start += size
    return Splits(*parts, stratified=True)


def k_folds(examples: Sequence[Example], k: int, seed: int) -> Folds:
    """k disjoint folds covering the input exactly once, stratified when
    every class has >= k members (per-class round-robin dealing)."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if len(examples) < k:
        raise ConfigError(f"cannot make {k} folds from {len(examples)} "
                          f"examples")
    rng = rng_for(seed, "folds")
    folds: list[list[Example]] = [[] for _ in range(k)]
    groups = _by_class(examples)
    stratified = all(len(g) >= k for g in groups.values())
    if stratified:
        for members in groups.values():
            order = rng.permutation(len(members))
            for i, j in enumerate(order):
                folds[i % k].append(members[j])
    else:
        order = rng.permutation(len(examples))
        for i, j in enumerate(order):
            folds[i % k].append(examples[j])
    return Folds(folds=folds, stratified=stratified)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    token_ids: np.ndarray      # int64 [batch, seq]
    attention_mask: np.ndarray  # float64 [batch, seq], 1 = real token
    targets: np.ndarray        # int64 [batch] or float64 [batch, k]
    ids: list[str]

    def __post_init__(self) -> None:
        if self.token_ids.shape != self.attention_mask.shape:
            raise ConfigError("token ids and mask shapes differ")

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def _targets_for(chunk: Sequence[Example], label_space: LabelSpace) -> np.ndarray:
    if label_space.single_label:
        return np.array([label_space.index_of(ex.labels[0]) for ex in chunk],
                        dtype=np.int64)
    out = np.zeros((len(chunk), len(label_space.labels)), dtype=np.float64)
    for row, ex in enumerate(chunk):
        for label in ex.labels:
            out[row, label_space.index_of(label)] = 1.0
    return out


def _assemble(chunk: Sequence[Example], vocab: Vocabulary,
              label_space: LabelSpace, max_seq_len: int) -> Batch:
    encoded = [encode(ex.text, vocab, max_seq_len) for ex in chunk]
    ids = np.stack([e[0] for e in encoded])
    mask = np.stack([e[1] for e in encoded])
    # trim uniform padding columns; the longest row caps the batch width
    width = max(2, int(mask.sum(axis=1).max()))
    return Batch(token_ids=ids[:, :width], attention_mask=mask[:, :width],
                 targets=_targets_for(chunk, label_space),
                 ids=[ex.id for ex in chunk])


def batches(examples: Sequence[Example], vocab: Vocabulary,
            label_space: LabelSpace, batch_size: int, max_seq_len: int,
            train: bool, seed: int = 0) -> Iterator[Batch]:
    """Deterministic batch stream.

    Training mode shuffles under the seed and drops a final partial batch
    (batch statistics in the objective need full batches); eval mode keeps
    the corpus order and the final partial batch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(examples)))
    if train:
        rng = rng_for(seed, "shuffle")
        order = [int(i) for i in rng.permutation(len(examples))]
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start:start + batch_size]]
        if train and len(chunk) < batch_size:
            break
        yield _assemble(chunk, vocab, label_space, max_seq_len)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    """Recipe for a seeded synthetic corpus.

    Each class owns a keyword list; texts embed a keyword in a literal
    template with probability (1 - ambiguity) and in a figurative template
    with a keyword drawn from a uniformly random class otherwise.  At
    ambiguity 0 a bag-of-keywords rule is a perfect classifier; at ambiguity
    1 the keyword class carries no information about the label.
    """

    task_kind: str
    classes: tuple[str, ...]
    keywords: dict[str, tuple[str, ...]]
    literal_templates: tuple[str, ...]
    figurative_templates: tuple[str, ...]
    ambiguity: float
    count: int

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ConfigError(f"ambiguity must lie in [0, 1], "
                              f"got {self.ambiguity}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        for cls in self.classes:
            if not self.keywords.get(cls):
                raise ConfigError(f"class {cls!r} has an empty keyword list")
        for pool_name, pool in (("literal", self.literal_templates),
                                ("figurative", self.figurative_templates)):
            if not pool:
                raise ConfigError(f"{pool_name} template pool is empty")
            for tpl in pool:
                if "{kw}" not in tpl:
                    raise ConfigError(f"template {tpl!r} lacks a "
                                      f"{{kw}} placeholder")

    def label_space(self) -> LabelSpace:
        return LabelSpace(task_kind=self.task_kind, labels=self.classes)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthSpec":
        required = {"task_kind", "classes", "keywords", "literal_templates",
                    "figurative_templates", "ambiguity", "count"}
        missing = required - raw.keys()
        if missing:
            raise ConfigError(f"synthetic spec missing fields: "
                              f"{sorted(missing)}")
        unknown = raw.keys() - required
        if unknown:
            raise ConfigError(f"synthetic spec has unknown fields: "
                              f"{sorted(unknown)}")
        return cls(task_kind=raw["task_kind"],
                   classes=tuple(raw["classes"]),
                   keywords={k: tuple(v) for k, v in raw["keywords"].items()},
                   literal_templates=tuple(raw["literal_templates"]),
                   figurative_templates=tuple(raw["figurative_templates"]),
                   ambiguity=float(raw["ambiguity"]),
                   count=int(raw["count"]))

    def to_dict(self) -> dict:
        return {"task_kind": self.task_kind,
                "classes": list(self.classes),
                "keywords": {k: list(v) for k, v in self.keywords.items()},
                "literal_templates": list(self.literal_templates),
                "figurative_templates": list(self.figurative_templates),
                "ambiguity": self.ambiguity,
                "count": self.count}


def load_synth_spec(path: str | Path) -> SynthSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read synthetic spec {path}: {err}") from err
    return SynthSpec.from_dict(raw)


def _sentence(spec: SynthSpec, label: str, rng: np.random.Generator) -> str:
    if rng.random() < spec.ambiguity:
        template = spec.figurative_templates[
            rng.integers(len(spec.figurative_templates))]
        kw_class = spec.classes[rng.integers(len(spec.classes))]
    else:
        template = spec.literal_templates[
            rng.integers(len(spec.literal_templates))]
        kw_class = label
    pool = spec.keywords[kw_class]
    return template.format(kw=pool[rng.integers(len(pool))])


def gen_synthetic(spec: SynthSpec, seed: int) -> list[Example]:
    """Seeded corpus: byte-identical across runs for the same (spec, seed).

    Single-label classes cycle round-robin for balance; multilabel examples
    draw 1-3 distinct classes, each contributing one sentence.
    """
    rng = rng_for(seed, "synth")
    examples: list[Example] = []
    n_classes = len(spec.classes)
    for i in range(spec.count):
        if spec.task_kind == "multilabel":
            n_labels = int(rng.integers(1, min(3, n_classes) + 1))
            chosen = rng.choice(n_classes, size=n_labels, replace=False)
            labels = tuple(spec.classes[int(c)] for c in sorted(chosen))
            text = " . ".join(_sentence(spec, lbl, rng) for lbl in labels)
        else:
            labels = (spec.classes[i % n_classes],)
            text = _sentence(spec, labels[0], rng)
        examples.append(Example(id=f"synth-{i:05d}", text=text, labels=labels))
    return examples
