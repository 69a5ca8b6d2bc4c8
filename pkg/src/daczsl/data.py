"""Synthetic multi-domain corpus, class-incremental task streams and splits.

Each class gets a latent Gaussian prototype; each domain gets a fixed affine
map whose deviation from the identity is controlled by
``domain_shift_strength``, so the no-shift limit is exact. Semantic vectors
are unit-normalized Gaussians correlated with the prototypes through a
shared projection, which is what makes zero-shot transfer possible at all.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .optim import ConfigError

MODES = ("DAZSL", "GDAZSL", "U_DACZSL", "N_DACZSL", "DAG_CZSL")
CONTINUAL_MODES = ("U_DACZSL", "N_DACZSL", "DAG_CZSL")

# Training rows of a domain-agnostic stream carry this instead of a domain id.
DOMAIN_WITHHELD = -1

_TAG_PROTO, _TAG_DOMAIN, _TAG_NOISE, _TAG_SEM = 1, 2, 3, 4
_TAG_SHUFFLE, _TAG_SPLIT, _TAG_DROP = 5, 6, 7


class SamplingError(ValueError):
    """A sampling request cannot be satisfied by the available data."""


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


def normalize_mode(mode: str) -> str:
    canon = mode.strip().upper().replace("-", "_")
    if canon == "DAGCZSL":
        canon = "DAG_CZSL"
    if canon not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return canon


@dataclass
class SplitConfig:
    """Everything that determines a corpus and its task stream."""

    mode: str = "U_DACZSL"
    num_domains: int = 4
    num_classes: int = 12
    num_tasks: int = 3
    target_domain: int = 3
    classes_per_task: Optional[int] = None
    seed: int = 0
    feature_dim: int = 32
    semantic_dim: int = 16
    domain_shift_strength: float = 0.5
    class_separation: float = 3.0
    examples_per_pair: int = 50
    semantic_correlation: float = 0.8
    train_fraction: float = 0.8
    dropped_per_task: int = 1

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)

    @property
    def source_domains(self) -> list[int]:
        return [d for d in range(self.num_domains) if d != self.target_domain]

    def task_class_count(self) -> int:
        if self.classes_per_task is not None:
            return self.classes_per_task
        return self.num_classes // self.num_tasks

    def validate(self) -> None:
        if self.num_domains < 2:
            raise ConfigError("num_domains must be >= 2 (one target plus sources)")
        if not 0 <= self.target_domain < self.num_domains:
            raise ConfigError(
                f"target_domain {self.target_domain} outside [0, {self.num_domains})")
        if self.num_classes < 1 or self.feature_dim < 1 or self.semantic_dim < 1:
            raise ConfigError("num_classes, feature_dim and semantic_dim must be >= 1")
        if self.examples_per_pair < 2:
            raise ConfigError("examples_per_pair must be >= 2 to allow a train/test split")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.domain_shift_strength < 0:
            raise ConfigError("domain_shift_strength must be >= 0")
        if not 0.0 <= self.semantic_correlation <= 1.0:
            raise ConfigError("semantic_correlation must lie in [0, 1]")
        if self.mode in CONTINUAL_MODES:
            if self.num_tasks < 1:
                raise ConfigError("num_tasks must be >= 1")
            if self.num_tasks > self.num_classes:
                raise ConfigError(
                    f"num_tasks ({self.num_tasks}) exceeds num_classes ({self.num_classes})")
            cpt = self.task_class_count()
            if cpt < 1:
                raise ConfigError("classes_per_task must be >= 1")
            if cpt * self.num_tasks > self.num_classes:
                raise ConfigError(
                    f"classes_per_task * num_tasks = {cpt * self.num_tasks} exceeds "
                    f"num_classes ({self.num_classes})")
        else:
            if self.num_classes < 3:
                raise ConfigError("DAZSL/GDAZSL splits need at least 3 classes")
        if self.mode == "N_DACZSL":
            if self.dropped_per_task < 1:
                raise ConfigError("dropped_per_task must be >= 1 in N_DACZSL")
            if len(self.source_domains) - self.dropped_per_task < 1:
                raise ConfigError(
                    "N_DACZSL needs at least one source domain left after dropping "
                    f"{self.dropped_per_task}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitConfig":
        return cls(**d)


@dataclass(eq=False)
class LabeledExample:
    """One feature vector with its class, domain and task identity."""

    x: np.ndarray
    y: int
    d: int
    t: int


class SemanticTable:
    """Per-class unit-norm attribute vectors; the domain-independent side info."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("semantic rows must be unit-normalized")
        seen = set()
        for r in vectors:
            key = r.tobytes()
            if key in seen:
                raise ValueError("semantic rows of distinct classes must differ")
            seen.add(key)
        self.vectors = vectors

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, c: int) -> np.ndarray:
        return self.vectors[c]


@dataclass
class Corpus:
    """Fully generated labeled data plus the generative pieces for inspection."""

    config: SplitConfig
    features: np.ndarray        # (M, feature_dim)
    labels: np.ndarray          # (M,)
    domains: np.ndarray         # (M,)
    semantics: SemanticTable
    prototypes: np.ndarray      # (C, feature_dim)
    domain_mats: np.ndarray     # (D, feature_dim, feature_dim)
    domain_biases: np.ndarray   # (D, feature_dim)

    def cell_indices(self, c: int, d: int) -> np.ndarray:
        return np.flatnonzero((self.labels == c) & (self.domains == d))


@dataclass
class Task:
    """One step of the class-incremental stream."""

    index: int
    classes: list[int]
    train: list[LabeledExample]
    test_by_domain: dict[int, list[LabeledExample]]
    visible_domains: list[int]
    dropped_domains: list[int]


@dataclass
class TaskStream:
    """Ordered tasks with their visible-domain sets and per-domain test sets."""

    config: SplitConfig
    semantics: SemanticTable
    tasks: list[Task]
    seen_classes: list[int] = field(default_factory=list)
    unseen_classes: list[int] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def target_domain(self) -> int:
        return self.config.target_domain

    def all_classes(self) -> list[int]:
        out: set[int] = set()
        for task in self.tasks:
            out.update(task.classes)
        out.update(self.unseen_classes)
        return sorted(out)

    def classes_up_to(self, t: int) -> list[int]:
        out: set[int] = set()
        for task in self.tasks[:t + 1]:
            out.update(task.classes)
        return sorted(out)


def _make_semantics(cfg: SplitConfig, prototypes: np.ndarray) -> SemanticTable:
    rng = _rng(cfg.seed, _TAG_SEM)
    projection = rng.normal(size=(cfg.feature_dim, cfg.semantic_dim))
    noise = rng.normal(size=(cfg.num_classes, cfg.semantic_dim))
    rho = cfg.semantic_correlation
    rows = np.empty((cfg.num_classes, cfg.semantic_dim))
    for c in range(cfg.num_classes):
        projected = prototypes[c] @ projection
        u = projected / np.linalg.norm(projected)
        g = noise[c] / np.linalg.norm(noise[c])
        raw = rho * u + math.sqrt(1.0 - rho * rho) * g
        rows[c] = raw / np.linalg.norm(raw)
    return SemanticTable(rows)


def generate_corpus(cfg: SplitConfig) -> Corpus:
    """Deterministically generate the full labeled corpus for ``cfg``.

    Every (class, domain) pair contributes ``examples_per_pair`` rows of
    x = W_d (p_c + noise) + b_d. With domain_shift_strength == 0 the maps
    are exactly the identity.
    """
    cfg.validate()
    f = cfg.feature_dim
    proto_rng = _rng(cfg.seed, _TAG_PROTO)
    prototypes = cfg.class_separation * proto_rng.normal(size=(cfg.num_classes, f))

    dom_rng = _rng(cfg.seed, _TAG_DOMAIN)
    mats = np.empty((cfg.num_domains, f, f))
    biases = np.empty((cfg.num_domains, f))
    s = cfg.domain_shift_strength
    for d in range(cfg.num_domains):
        deviation = dom_rng.normal(size=(f, f)) / math.sqrt(f)
        shift = dom_rng.normal(size=f)
        mats[d] = np.eye(f) + s * deviation
        biases[d] = s * shift

    noise_rng = _rng(cfg.seed, _TAG_NOISE)
    n = cfg.examples_per_pair
    total = cfg.num_classes * cfg.num_domains * n
    features = np.empty((total, f))
    labels = np.empty(total, dtype=np.int64)
    domains = np.empty(total, dtype=np.int64)
    row = 0
    for c in range(cfg.num_classes):
        for d in range(cfg.num_domains):
            noise = noise_rng.normal(size=(n, f))
            features[row:row + n] = (prototypes[c] + noise) @ mats[d].T + biases[d]
            labels[row:row + n] = c
            domains[row:row + n] = d
            row += n

    semantics = _make_semantics(cfg, prototypes)
    return Corpus(cfg, features, labels, domains, semantics, prototypes, mats, biases)


def split_dazsl(corpus: Corpus, cfg: SplitConfig) -> dict[str, list[int]]:
    """Partition classes into train/val/test groups, proportioned 245/55/45-of-345."""
    if cfg.mode not in ("DAZSL", "GDAZSL"):
        raise ConfigError(f"split_dazsl applies to DAZSL/GDAZSL, not {cfg.mode}")
    c = cfg.num_classes
    if c < 3:
        raise ConfigError("DAZSL/GDAZSL splits need at least 3 classes")
    order = _rng(cfg.seed, _TAG_SHUFFLE).permutation(c).tolist()
    n_val = max(1, math.floor(c * 55 / 345 + 0.5))
    n_test = max(1, math.floor(c * 45 / 345 + 0.5))
    n_train = c - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


def _split_cell(corpus: Corpus, c: int, d: int, cfg: SplitConfig):
    idx = corpus.cell_indices(c, d)
    perm = _rng(cfg.seed, _TAG_SPLIT, c, d).permutation(len(idx))
    n_train = math.floor(cfg.train_fraction * len(idx) + 0.5)
    n_train = min(n_train, len(idx) - 1)
    shuffled = idx[perm]
    return shuffled[:n_train], shuffled[n_train:]


def _examples(corpus: Corpus, indices: Iterable[int], t: int,
              domain_override: Optional[int] = None) -> list[LabeledExample]:
    out = []
    for i in indices:
        d = int(corpus.domains[i]) if domain_override is None else domain_override
        out.append(LabeledExample(corpus.features[i], int(corpus.labels[i]), d, t))
    return out


def build_task_stream(corpus: Corpus, cfg: SplitConfig) -> TaskStream:
    """Assemble the per-task train/test structure for every protocol mode.

    Classes are shuffled by seed and cut into contiguous blocks; each
    (class, domain) cell is split train/test by ``train_fraction``. Target
    domain rows never reach a training set. N_DACZSL additionally removes
    seeded source domains from each task's training data only, and the
    domain-agnostic mode withholds the domain label of training rows.
    """
    cfg.validate()
    if cfg.mode in ("DAZSL", "GDAZSL"):
        return _build_single_split_stream(corpus, cfg)

    order = _rng(cfg.seed, _TAG_SHUFFLE).permutation(cfg.num_classes).tolist()
    cpt = cfg.task_class_count()
    drop_rng = _rng(cfg.seed, _TAG_DROP)
    sources = cfg.source_domains

    tasks = []
    for t in range(cfg.num_tasks):
        classes = sorted(order[t * cpt:(t + 1) * cpt])
        dropped: list[int] = []
        if cfg.mode == "N_DACZSL":
            dropped = sorted(
                drop_rng.choice(sources, size=cfg.dropped_per_task, replace=False).tolist())
        visible = [d for d in sources if d not in dropped]
        override = DOMAIN_WITHHELD if cfg.mode == "DAG_CZSL" else None

        train: list[LabeledExample] = []
        test_by_domain: dict[int, list[LabeledExample]] = {
            d: [] for d in range(cfg.num_domains)}
        for c in classes:
            for d in range(cfg.num_domains):
                train_idx, test_idx = _split_cell(corpus, c, d, cfg)
                test_by_domain[d].extend(_examples(corpus, test_idx, t))
                if d in visible:
                    train.extend(_examples(corpus, train_idx, t, domain_override=override))
        tasks.append(Task(t, classes, train, test_by_domain, visible, dropped))
    return TaskStream(cfg, corpus.semantics, tasks)


def _build_single_split_stream(corpus: Corpus, cfg: SplitConfig) -> TaskStream:
    # One "task" of the seen classes; unseen classes appear only in test sets.
    groups = split_dazsl(corpus, cfg)
    seen = sorted(groups["train"] + groups["val"])
    unseen = groups["test"]
    sources = cfg.source_domains

    train: list[LabeledExample] = []
    test_by_domain: dict[int, list[LabeledExample]] = {
        d: [] for d in range(cfg.num_domains)}
    for c in range(cfg.num_classes):
        for d in range(cfg.num_domains):
            train_idx, test_idx = _split_cell(corpus, c, d, cfg)
            test_by_domain[d].extend(_examples(corpus, test_idx, 0))
            if c in seen and d in sources:
                train.extend(_examples(corpus, train_idx, 0))
    task = Task(0, seen, train, test_by_domain, sources, [])
    return TaskStream(cfg, corpus.semantics, [task],
                      seen_classes=seen, unseen_classes=unseen)


def sample_kshot(examples: Sequence[LabeledExample], k: int,
                 rng: np.random.Generator) -> list[LabeledExample]:
    """Exactly k examples per (class, domain) cell, drawn without replacement."""
    cells: dict[tuple[int, int], list[LabeledExample]] = {}
    for ex in examples:
        cells.setdefault((ex.y, ex.d), []).append(ex)
    out: list[LabeledExample] = []
    for key in sorted(cells):
        pool = cells[key]
        if len(pool) < k:
            raise SamplingError(
                f"cell (class={key[0]}, domain={key[1]}) holds {len(pool)} "
                f"examples, fewer than k={k}")
        chosen = rng.choice(len(pool), size=k, replace=False)
        out.extend(pool[i] for i in sorted(chosen.tolist()))
    return out


# ---------------------------------------------------------------------------
# stream manifest export/import


def _format_floats(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def export_stream(stream: TaskStream, fh: TextIO) -> None:
    """Write the stream as line-delimited records under a JSON config header.

    Floats are written with shortest round-trip representation, so a
    re-import reproduces every value bit-exactly.
    """
    fh.write("#CONFIG " + json.dumps(stream.config.to_dict(), sort_keys=True) + "\n")
    if stream.seen_classes or stream.unseen_classes:
        fh.write("#SEEN " + ",".join(map(str, stream.seen_classes)) + "\n")
        fh.write("#UNSEEN " + ",".join(map(str, stream.unseen_classes)) + "\n")
    for c in range(stream.semantics.num_classes):
        fh.write(f"#SEMANTIC {c}," + _format_floats(stream.semantics.row(c)) + "\n")
    for task in stream.tasks:
        fh.write(
            f"#TASK {task.index}"
            f",classes={'|'.join(map(str, task.classes))}"
            f",visible={'|'.join(map(str, task.visible_domains))}"
            f",dropped={'|'.join(map(str, task.dropped_domains))}\n")
    for task in stream.tasks:
        for ex in task.train:
            fh.write(f"{task.index},{ex.y},{ex.d},train," + _format_floats(ex.x) + "\n")
        for d in sorted(task.test_by_domain):
            for ex in task.test_by_domain[d]:
                fh.write(f"{task.index},{ex.y},{ex.d},test," + _format_floats(ex.x) + "\n")


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split("|") if p != ""]


def import_stream(fh: TextIO) -> TaskStream:
    """Rebuild a TaskStream from its manifest; inverse of export_stream."""
    config: Optional[SplitConfig] = None
    semantic_rows: dict[int, np.ndarray] = {}
    task_meta: dict[int, dict] = {}
    seen: list[int] = []
    unseen: list[int] = []
    records: list[tuple[int, int, int, str, np.ndarray]] = []

    for line_no, raw in enumerate(fh, start=1):
        line = raw.rstrip("\n")
        if not line:
            continue
        if line.startswith("#CONFIG "):
            config = SplitConfig.from_dict(json.loads(line[len("#CONFIG "):]))
        elif line.startswith("#SEEN "):
            seen = [int(p) for p in line[len("#SEEN "):].split(",") if p]
        elif line.startswith("#UNSEEN "):
            unseen = [int(p) for p in line[len("#UNSEEN "):].split(",") if p]
        elif line.startswith("#SEMANTIC "):
            body = line[len("#SEMANTIC "):]
            head, rest = body.split(",", 1)
            semantic_rows[int(head)] = np.array(
                [float(p) for p in rest.split(",")], dtype=np.float64)
        elif line.startswith("#TASK "):
            body = line[len("#TASK "):]
            parts = body.split(",")
            meta = {"index": int(parts[0])}
            for p in parts[1:]:
                key, _, value = p.partition("=")
                meta[key] = _parse_int_list(value)
            task_meta[meta["index"]] = meta
        elif line.startswith("#"):
            raise ValueError(f"line {line_no}: unknown header line {line!r}")
        else:
            parts = line.split(",")
            t, y, d, split = int(parts[0]), int(parts[1]), int(parts[2]), parts[3]
            x = np.array([float(p) for p in parts[4:]], dtype=np.float64)
            records.append((t, y, d, split, x))

    if config is None:
        raise ValueError("manifest is missing its #CONFIG header")
    if not task_meta:
        raise ValueError("manifest is missing #TASK headers")
    semantics = SemanticTable(
        np.vstack([semantic_rows[c] for c in sorted(semantic_rows)]))

    tasks = []
    for t in sorted(task_meta):
        meta = task_meta[t]
        tasks.append(Task(t, meta["classes"], [],
                          {d: [] for d in range(config.num_domains)},
                          meta["visible"], meta["dropped"]))
    by_index = {task.index: task for task in tasks}
    for t, y, d, split, x in records:
        ex = LabeledExample(x, y, d, t)
        if split == "train":
            by_index[t].train.append(ex)
        else:
            by_index[t].test_by_domain[d].append(ex)
    return TaskStream(config, semantics, tasks, seen_classes=seen, unseen_classes=unseen)
