"""Two-stage continual training over the task stream.

Per task: an optional prompt-learning stage (only the prompt table is
unfrozen, contrastive loss on the global path), then the main stage (global
net, current local net and text encoder step against the weighted total
loss, followed by inner discriminator steps on detached features), then the
episodic buffer is extended. Snapshots after each task feed the accuracy
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .data import Task, TaskStream, LabeledExample, sample_kshot, DOMAIN_WITHHELD
from .losses import Batch, LossWeights, adv_loss_discriminator, contrastive_loss, total_loss
from .metrics import ScoreTable
from .model import DinModel, ModelConfig
from .optim import ConfigError, cosine_lr, step_adamw, step_sgd

_TAG_PROMPT_SAMPLE, _TAG_MAIN_SAMPLE, _TAG_SHUFFLE, _TAG_BUFFER = 21, 22, 23, 24


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


def prompt_epoch_schedule(k_shot: int) -> int:
    """Prompt-stage epochs as a function of the shot count."""
    if k_shot >= 8:
        return 200
    if k_shot >= 2:
        return 100
    return 50


@dataclass
class TrainConfig:
    """Optimization hyperparameters. Defaults follow the full-scale recipe;
    ``desk()`` returns the small-scale preset used by the synthetic runs
    (a randomly initialized small encoder needs a far larger rate than a
    pretrained backbone)."""

    k_shot: int = 16
    buffer_per_class: int = 1
    batch_size: int = 256
    prompt_epochs: Optional[int] = None   # None -> schedule from k_shot
    prompt_epoch_scale: float = 1.0
    main_epochs: int = 25
    disc_steps: int = 1
    lr_prompt: float = 0.002
    lr_encoders: float = 5e-7
    lr_disc: float = 0.001
    wd_encoders: float = 0.02
    wd_disc: float = 0.01
    warmup_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    buffer_extend_per_epoch: bool = False

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(lr_encoders=1e-3, main_epochs=10, batch_size=64, k_shot=8)
        base.update(overrides)
        return cls(**base)

    def resolved_prompt_epochs(self) -> int:
        if self.prompt_epochs is not None:
            return self.prompt_epochs
        return max(1, round(prompt_epoch_schedule(self.k_shot) * self.prompt_epoch_scale))

    def validate(self) -> None:
        if self.k_shot < 1:
            raise ConfigError("k_shot must be >= 1")
        if self.buffer_per_class < 0:
            raise ConfigError("buffer_per_class must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.main_epochs < 0 or self.resolved_prompt_epochs() < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.disc_steps < 0:
            raise ConfigError("disc_steps must be >= 0")
        for name in ("lr_prompt", "lr_encoders", "lr_disc"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.main_epochs > 0 and self.warmup_epochs >= self.main_epochs:
            raise ConfigError(
                f"warmup_epochs ({self.warmup_epochs}) must be < main_epochs "
                f"({self.main_epochs})")


@dataclass
class AblationFlags:
    """Component toggles; combinations reproduce the ablation grid."""

    use_local: bool = True
    use_domain_disc: bool = True
    use_task_disc: bool = True
    use_disen: bool = True
    use_buffer: bool = True
    use_prompt_stage: bool = False
    prompt_init: str = "CWP"
    prompt_placement: str = "end"


class MemoryBuffer:
    """Episodic memory: a growing store of past-task training examples."""

    def __init__(self):
        self.examples: list[LabeledExample] = []

    def __len__(self) -> int:
        return len(self.examples)

    def classes(self) -> list[int]:
        return sorted({ex.y for ex in self.examples})

    def extend_from_task(self, task: Task, per_class: int,
                         rng: np.random.Generator) -> list[LabeledExample]:
        """Add ``per_class`` samples per (class, visible domain) cell of the task."""
        if per_class == 0:
            return []
        added = sample_kshot(task.train, per_class, rng)
        self.examples.extend(added)
        return added


def _set_phase(model: DinModel, unfrozen: set[str]) -> None:
    for name, group in model.groups.items():
        group.frozen = name not in unfrozen


def _assert_phase(model: DinModel, unfrozen: set[str]) -> None:
    # Freeze discipline: exactly the phase's groups may be stepped.
    for name, group in model.groups.items():
        assert group.frozen == (name not in unfrozen), (
            f"group {name} frozen={group.frozen}, phase expects unfrozen={unfrozen}")


def _batches(data: Sequence[LabeledExample], batch_size: int,
             rng: np.random.Generator):
    order = rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield Batch.from_examples([data[i] for i in order[start:start + batch_size]])


def train_prompt_stage(model: DinModel, task: Task, cfg: TrainConfig,
                       weights: LossWeights, rng: np.random.Generator,
                       log: Optional[list] = None) -> list[float]:
    """Prompt learning: only the prompt table trains, on the global path.

    Each epoch re-samples a k-shot subset of the task and takes one full-batch
    AdamW step on the contrastive loss. Returns the per-epoch loss trajectory.
    """
    cfg.validate()
    epochs = cfg.resolved_prompt_epochs()
    unfrozen = {"pr"}
    _set_phase(model, unfrozen)
    losses: list[float] = []
    for epoch in range(epochs):
        subset = sample_kshot(task.train, cfg.k_shot, rng)
        batch = Batch.from_examples(subset)
        with Tape() as tape:
            z = model.global_only_embed(Tensor(batch.x))
            pool = sorted(set(batch.y.tolist()))
            protos = model.text_prototypes(pool)
            loss = contrastive_loss(z, batch.y, (pool, protos), weights.tau)
            tape.backward(loss)
        _assert_phase(model, unfrozen)
        step_adamw(model.groups["pr"], cfg.lr_prompt, cfg.beta1, cfg.beta2,
                   cfg.adam_eps, 0.0)
        model.zero_grad()
        losses.append(loss.item())
        if log is not None:
            log.append({"task": task.index, "stage": "prompt", "epoch": epoch,
                        "loss_total": loss.item(), "loss_disen": 0.0,
                        "loss_adv": 0.0, "loss_cont": loss.item(),
                        "loss_disc": 0.0, "lr": cfg.lr_prompt})
    return losses


def train_main_stage(model: DinModel, task: Task, buffer: Optional[MemoryBuffer],
                     cfg: TrainConfig, weights: LossWeights, flags: AblationFlags,
                     seed: int, log: Optional[list] = None) -> None:
    """Alg-style inner loop for one task: encoder steps then discriminator steps.

    Batches are drawn from the task's k-shot subset joined with the episodic
    buffer; the buffer is extended after the epochs (or each epoch, behind
    ``buffer_extend_per_epoch``).
    """
    cfg.validate()
    t = task.index
    if flags.use_local:
        model.ensure_local(t)
    encoder_groups = ["G", "Text"]
    if flags.use_local:
        encoder_groups.append(model.local_group_name(t))
    disc_groups = [g for g in ("D_dm", "D_ta") if g in model.groups]
    unfrozen = set(encoder_groups) | set(disc_groups)
    _set_phase(model, unfrozen)

    sample_rng = _rng(seed, _TAG_MAIN_SAMPLE, t)
    shuffle_rng = _rng(seed, _TAG_SHUFFLE, t)
    buffer_rng = _rng(seed, _TAG_BUFFER, t)

    subset = sample_kshot(task.train, cfg.k_shot, sample_rng)
    data = list(subset)
    buffer_classes: list[int] = []
    if buffer is not None and flags.use_buffer:
        data.extend(buffer.examples)
        buffer_classes = buffer.classes()

    # No future leakage: everything visible here belongs to tasks <= t.
    future = sum(1 for ex in data if ex.t > t)
    assert future == 0, f"{future} examples from future tasks reached task {t}"

    for epoch in range(cfg.main_epochs):
        lr = cosine_lr(cfg.lr_encoders, epoch, cfg.main_epochs, cfg.warmup_epochs)
        sums = {"total": 0.0, "disen": 0.0, "adv": 0.0, "cont": 0.0, "disc": 0.0}
        n_batches = 0
        for batch in _batches(data, cfg.batch_size, shuffle_rng):
            with Tape() as tape:
                loss, parts = total_loss(batch, model, weights, t,
                                         buffer_classes=buffer_classes,
                                         use_disen=flags.use_disen)
                tape.backward(loss)
            _assert_phase(model, unfrozen)
            for name in encoder_groups:
                step_adamw(model.groups[name], lr, cfg.beta1, cfg.beta2,
                           cfg.adam_eps, cfg.wd_encoders)
            model.zero_grad()

            disc_loss_value = 0.0
            if disc_groups:
                for _ in range(cfg.disc_steps):
                    with Tape() as tape:
                        dloss = adv_loss_discriminator(batch, model, weights)
                        tape.backward(dloss)
                    _assert_phase(model, unfrozen)
                    for name in disc_groups:
                        step_sgd(model.groups[name], cfg.lr_disc, cfg.wd_disc)
                    model.zero_grad()
                    disc_loss_value = dloss.item()

            for key in ("total", "disen", "adv", "cont"):
                sums[key] += parts[key]
            sums["disc"] += disc_loss_value
            n_batches += 1

        if log is not None and n_batches:
            log.append({"task": t, "stage": "main", "epoch": epoch,
                        "loss_total": sums["total"] / n_batches,
                        "loss_disen": sums["disen"] / n_batches,
                        "loss_adv": sums["adv"] / n_batches,
                        "loss_cont": sums["cont"] / n_batches,
                        "loss_disc": sums["disc"] / n_batches,
                        "lr": lr})
        if buffer is not None and flags.use_buffer and cfg.buffer_extend_per_epoch:
            buffer.extend_from_task(task, cfg.buffer_per_class, buffer_rng)

    if buffer is not None and flags.use_buffer and not cfg.buffer_extend_per_epoch:
        buffer.extend_from_task(task, cfg.buffer_per_class, buffer_rng)


# ---------------------------------------------------------------------------
# full sequence


@dataclass
class RunResult:
    matrix: list[list[float]]
    snapshots: list[DinModel]
    score_tables: list[Optional[ScoreTable]]
    prompt_losses: dict[int, list[float]]
    log_records: list[dict] = field(default_factory=list)
    buffer_sizes: list[int] = field(default_factory=list)


def build_model(stream: TaskStream, model_cfg: ModelConfig,
                flags: AblationFlags, seed: int) -> DinModel:
    """Instantiate the model for a stream, honoring the ablation flags."""
    use_domain = flags.use_domain_disc and stream.mode != "DAG_CZSL"
    cfg = replace(
        model_cfg,
        feature_dim=stream.config.feature_dim,
        semantic_dim=stream.semantics.dim,
        dim_per_token=stream.semantics.dim,
        num_classes=stream.semantics.num_classes,
        num_domains=stream.config.num_domains,
        num_tasks=max(stream.num_tasks, 1),
        prompt_init=flags.prompt_init,
        prompt_placement=flags.prompt_placement,
        with_local=flags.use_local,
        with_domain_disc=use_domain,
        with_task_disc=flags.use_task_disc,
        seed=seed,
    )
    return DinModel(cfg, stream.semantics)


def evaluate_snapshot(model: DinModel, stream: TaskStream, snapshot_task: int,
                      eval_pool: str = "all",
                      global_only: bool = False) -> tuple[list[float], ScoreTable]:
    """Accuracy per task on the target domain, plus the snapshot's score table.

    The score table always spans the full class pool; the matrix entry uses
    either the full pool (default, the hardest setting) or only the classes
    revealed up to the snapshot when ``eval_pool == 'revealed'``.
    """
    full_pool = stream.all_classes()
    revealed = set(stream.classes_up_to(snapshot_task))
    if eval_pool == "all":
        allowed_cols = list(range(len(full_pool)))
    elif eval_pool == "revealed":
        allowed_cols = [i for i, c in enumerate(full_pool) if c in revealed]
    else:
        raise ConfigError(f"eval_pool must be 'all' or 'revealed', got {eval_pool!r}")

    target = stream.target_domain
    row: list[float] = []
    all_scores = []
    all_truths = []
    for k, task in enumerate(stream.tasks):
        examples = task.test_by_domain[target]
        batch = Batch.from_examples(examples)
        t_used = None if global_only else model.resolve_local(k)
        pool, scores = model.class_scores(batch.x, t_used, full_pool)
        sub = scores[:, allowed_cols]
        preds = np.asarray([pool[allowed_cols[j]] for j in np.argmax(sub, axis=1)])
        row.append(float(np.mean(preds == batch.y)))
        all_scores.append(scores)
        all_truths.append(batch.y)

    if stream.seen_classes:
        seen = set(stream.seen_classes)
    else:
        seen = revealed
    table = ScoreTable(
        pool=full_pool,
        seen_mask=[c in seen for c in full_pool],
        scores=np.vstack(all_scores),
        true_classes=np.concatenate(all_truths),
    )
    return row, table


def run_sequence(stream: TaskStream, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 weights: LossWeights, flags: AblationFlags, seed: int,
                 eval_pool: str = "all", global_only_eval: bool = False) -> RunResult:
    """Train across the stream; snapshot and evaluate after every task."""
    train_cfg.validate()
    weights.validate()
    model = build_model(stream, model_cfg, flags, seed)
    buffer = MemoryBuffer() if flags.use_buffer else None
    log: list[dict] = []
    prompt_losses: dict[int, list[float]] = {}
    matrix: list[list[float]] = []
    snapshots: list[DinModel] = []
    tables: list[Optional[ScoreTable]] = []
    buffer_sizes: list[int] = []

    for task in stream.tasks:
        if flags.use_local:
            model.ensure_local(task.index)
        if flags.use_prompt_stage:
            prompt_rng = _rng(seed, _TAG_PROMPT_SAMPLE, task.index)
            prompt_losses[task.index] = train_prompt_stage(
                model, task, train_cfg, weights, prompt_rng, log)
        train_main_stage(model, task, buffer, train_cfg, weights, flags, seed, log)
        buffer_sizes.append(len(buffer) if buffer is not None else 0)

        snap = model.snapshot()
        row, table = evaluate_snapshot(snap, stream, task.index,
                                       eval_pool=eval_pool,
                                       global_only=global_only_eval)
        matrix.append(row)
        snapshots.append(snap)
        tables.append(table)

    return RunResult(matrix=matrix, snapshots=snapshots, score_tables=tables,
                     prompt_losses=prompt_losses, log_records=log,
                     buffer_sizes=buffer_sizes)
