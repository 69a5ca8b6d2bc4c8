"""The network family: global/local encoders, discriminators, prompts, fusion.

All blocks are small perceptrons over the autodiff engine. Parameters are
organized into named groups (pr, Text, G, L<t>, D_dm, D_ta) so the trainer
can freeze and step exactly the sets each phase dictates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SemanticTable
from .optim import ConfigError, ParameterGroup

PROMPT_INITS = ("GLP", "CWP")
PROMPT_PLACEMENTS = ("end", "mid")

_TAG_GLOBAL, _TAG_TEXT, _TAG_FUSION, _TAG_PROMPT = 11, 12, 13, 14
_TAG_DISC_DM, _TAG_DISC_TA, _TAG_LOCAL = 15, 16, 17


class LifecycleError(RuntimeError):
    """A component was used before the training phase that creates it."""


@dataclass
class ModelConfig:
    feature_dim: int = 32
    embed_dim: int = 16
    hidden_dim: int = 64
    disc_hidden: int = 1024
    prompt_length: int = 4
    dim_per_token: int = 16
    semantic_dim: int = 16
    leaky_slope: float = 0.01
    num_classes: int = 12
    num_domains: int = 4
    num_tasks: int = 3
    prompt_init: str = "CWP"
    prompt_placement: str = "end"
    with_local: bool = True
    with_domain_disc: bool = True
    with_task_disc: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.prompt_init not in PROMPT_INITS:
            raise ConfigError(f"prompt_init must be one of {PROMPT_INITS}")
        if self.prompt_placement not in PROMPT_PLACEMENTS:
            raise ConfigError(f"prompt_placement must be one of {PROMPT_PLACEMENTS}")
        if self.prompt_placement == "mid" and self.prompt_length % 2 != 0:
            raise ConfigError("mid placement needs an even prompt_length "
                              "(equal prefix and suffix)")
        if self.dim_per_token != self.semantic_dim:
            raise ConfigError("dim_per_token must equal semantic_dim so the class "
                              "token fits the prompt token sequence")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


def _linear_params(rng: np.random.Generator, d_in: int, d_out: int):
    w = Tensor(rng.normal(size=(d_in, d_out)) / np.sqrt(d_in), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return w, b


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


class Mlp:
    """Stack of affine layers with LeakyReLU between them (linear output)."""

    def __init__(self, rng: np.random.Generator, dims: Sequence[int], slope: float):
        self.slope = slope
        self.layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            self.layers.append(_linear_params(rng, d_in, d_out))

    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = _affine(h, w, b)
            if i + 1 < len(self.layers):
                h = ad.leaky_relu(h, self.slope)
        return h


class PromptTable:
    """Learnable context tokens per class, with end or mid class-token placement.

    GLP keeps a single shared slice broadcast to every class, so "identical
    initialization" stays identical under training. CWP stores one slice per
    class.
    """

    def __init__(self, rng: np.random.Generator, num_classes: int,
                 prompt_length: int, dim: int, init: str, placement: str):
        self.num_classes = num_classes
        self.prompt_length = prompt_length
        self.dim = dim
        self.init = init
        self.placement = placement
        scale = 1.0 / np.sqrt(dim)
        if init == "GLP":
            shared = Tensor(rng.normal(size=(prompt_length, dim)) * scale,
                            requires_grad=True)
            self._slices = [shared]
        else:
            self._slices = [
                Tensor(rng.normal(size=(prompt_length, dim)) * scale, requires_grad=True)
                for _ in range(num_classes)
            ]

    def tensors(self) -> list[Tensor]:
        return list(self._slices)

    def tokens(self, c: int) -> Tensor:
        if not 0 <= c < self.num_classes:
            raise IndexError(f"class {c} outside [0, {self.num_classes})")
        return self._slices[0] if self.init == "GLP" else self._slices[c]

    def sequence(self, c: int, class_token: Tensor) -> Tensor:
        """Token rows in placement order, the class token included."""
        tokens = self.tokens(c)
        if self.placement == "end":
            return ad.vstack([tokens, class_token])
        half = self.prompt_length // 2
        prefix = ad.row_slice(tokens, 0, half)
        suffix = ad.row_slice(tokens, half, self.prompt_length)
        return ad.vstack([prefix, class_token, suffix])


class DinModel:
    """Global net, per-task local nets, discriminators, prompts and fusion."""

    def __init__(self, config: ModelConfig, semantics: SemanticTable):
        config.validate()
        if semantics.num_classes < config.num_classes:
            raise ConfigError(
                f"semantic table covers {semantics.num_classes} classes, "
                f"model expects {config.num_classes}")
        if semantics.dim != config.semantic_dim:
            raise ConfigError(
                f"semantic dim {semantics.dim} != configured {config.semantic_dim}")
        self.config = config
        self.semantics = semantics
        c = config

        self.global_net = Mlp(_rng(c.seed, _TAG_GLOBAL),
                              (c.feature_dim, c.hidden_dim, c.embed_dim), c.leaky_slope)
        self.text_net = Mlp(_rng(c.seed, _TAG_TEXT),
                            (c.dim_per_token + c.semantic_dim, c.hidden_dim, c.embed_dim),
                            c.leaky_slope)
        self.fusion_w, self.fusion_b = _linear_params(
            _rng(c.seed, _TAG_FUSION), 2 * c.embed_dim, c.embed_dim)
        self.prompts = PromptTable(_rng(c.seed, _TAG_PROMPT), c.num_classes,
                                   c.prompt_length, c.dim_per_token,
                                   c.prompt_init, c.prompt_placement)
        self.domain_disc = None
        self.task_disc = None
        if c.with_domain_disc:
            self.domain_disc = Mlp(_rng(c.seed, _TAG_DISC_DM),
                                   (c.embed_dim, c.disc_hidden, c.disc_hidden,
                                    c.num_domains), c.leaky_slope)
        if c.with_task_disc:
            self.task_disc = Mlp(_rng(c.seed, _TAG_DISC_TA),
                                 (c.embed_dim, c.disc_hidden, c.disc_hidden,
                                  c.num_tasks), c.leaky_slope)
        self.local_nets: dict[int, Mlp] = {}

        self.groups: dict[str, ParameterGroup] = {}
        self.groups["G"] = ParameterGroup(
            "G", self.global_net.tensors() + [self.fusion_w, self.fusion_b])
        self.groups["Text"] = ParameterGroup("Text", self.text_net.tensors())
        self.groups["pr"] = ParameterGroup("pr", self.prompts.tensors())
        if self.domain_disc is not None:
            self.groups["D_dm"] = ParameterGroup("D_dm", self.domain_disc.tensors())
        if self.task_disc is not None:
            self.groups["D_ta"] = ParameterGroup("D_ta", self.task_disc.tensors())

    # -- lifecycle ---------------------------------------------------------

    def local_group_name(self, t: int) -> str:
        return f"L{t}"

    def ensure_local(self, t: int) -> None:
        """Instantiate the local net for task t (idempotent)."""
        if not self.config.with_local:
            raise LifecycleError("model was built without local nets")
        if t in self.local_nets:
            return
        c = self.config
        net = Mlp(_rng(c.seed, _TAG_LOCAL, t),
                  (c.feature_dim, c.hidden_dim, c.embed_dim), c.leaky_slope)
        self.local_nets[t] = net
        self.groups[self.local_group_name(t)] = ParameterGroup(
            self.local_group_name(t), net.tensors())

    def has_local(self, t: int) -> bool:
        return t in self.local_nets

    def newest_local(self) -> Optional[int]:
        return max(self.local_nets) if self.local_nets else None

    def zero_grad(self) -> None:
        for group in self.groups.values():
            group.zero_grad()

    # -- forward paths -----------------------------------------------------

    def encode_global(self, x: Tensor) -> Tensor:
        return self.global_net.forward(x)

    def encode_local(self, x: Tensor, t: int) -> Tensor:
        if t not in self.local_nets:
            raise LifecycleError(f"local net for task {t} was never instantiated")
        return self.local_nets[t].forward(x)

    def fuse(self, z_t: Tensor, z_g: Tensor) -> Tensor:
        fused = _affine(ad.concat(z_t, z_g), self.fusion_w, self.fusion_b)
        return ad.l2_normalize(fused)

    def global_only_embed(self, x: Tensor) -> Tensor:
        return ad.l2_normalize(self.encode_global(x))

    def embed(self, x: Tensor, t_used: Optional[int]) -> Tensor:
        """Unit-norm representation used by the classifier; ``t_used`` picks
        the local path, None means global-only."""
        z_g = self.encode_global(x)
        if t_used is None:
            return ad.l2_normalize(z_g)
        return self.fuse(self.encode_local(x, t_used), z_g)

    def encode_text(self, c: int) -> Tensor:
        """Unit-norm text prototype of class ``c`` from its prompt sequence."""
        if not 0 <= c < self.semantics.num_classes:
            raise IndexError(f"no semantic row for class {c}")
        class_token = Tensor(self.semantics.row(c))
        seq = self.prompts.sequence(c, class_token)
        pooled = ad.mean_axis0(seq)
        encoded = self.text_net.forward(ad.concat(pooled, class_token))
        return ad.l2_normalize(encoded)

    def text_prototypes(self, classes: Sequence[int]) -> Tensor:
        """Rows of unit prototypes for ``classes``, one batched encoder pass."""
        inputs = []
        for c in classes:
            class_token = Tensor(self.semantics.row(c))
            pooled = ad.mean_axis0(self.prompts.sequence(c, class_token))
            inputs.append(ad.concat(pooled, class_token))
        stacked = ad.vstack(inputs)
        return ad.l2_normalize(self.text_net.forward(stacked))

    def discriminate(self, z_g: Tensor, which: str, lam: float) -> Tensor:
        """Discriminator logits through the gradient-reversal layer."""
        if which == "domain":
            disc = self.domain_disc
        elif which == "task":
            disc = self.task_disc
        else:
            raise ValueError(f"which must be 'domain' or 'task', got {which!r}")
        if disc is None:
            raise LifecycleError(f"model was built without the {which} discriminator")
        return disc.forward(ad.grad_reverse(z_g, lam))

    # -- prediction --------------------------------------------------------

    def eval_embeddings(self, xs: np.ndarray, t_used: Optional[int]) -> np.ndarray:
        z = self.embed(Tensor(np.asarray(xs, dtype=np.float64)), t_used)
        return z.data

    def class_scores(self, xs: np.ndarray, t_used: Optional[int],
                     class_pool: Sequence[int]) -> tuple[list[int], np.ndarray]:
        """Cosine scores of each example against each pool class prototype."""
        pool = sorted(set(int(c) for c in class_pool))
        if not pool:
            raise ValueError("class pool is empty")
        protos = self.text_prototypes(pool).data
        z = self.eval_embeddings(np.atleast_2d(xs), t_used)
        z_unit = z / np.linalg.norm(z, axis=1, keepdims=True)
        p_unit = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        return pool, z_unit @ p_unit.T

    def predict(self, x: np.ndarray, t_hint: Optional[int],
                class_pool: Sequence[int]) -> int:
        """Argmax-cosine class over the pool; ties go to the lowest class index."""
        t_used = self.resolve_local(t_hint)
        pool, scores = self.class_scores(np.atleast_2d(x), t_used, class_pool)
        return pool[int(np.argmax(scores[0]))]

    def resolve_local(self, t_hint: Optional[int]) -> Optional[int]:
        """Local net used at evaluation: the hinted task's if it exists, else
        the newest one; None when local nets are absent or disabled."""
        if not self.config.with_local or not self.local_nets:
            return None
        newest = self.newest_local()
        if t_hint is None:
            return newest
        return t_hint if t_hint in self.local_nets else newest

    # -- persistence -------------------------------------------------------

    def snapshot(self) -> "DinModel":
        """Read-only deep copy for evaluation; shares nothing mutable."""
        clone = DinModel(self.config, self.semantics)
        for t in self.local_nets:
            clone.ensure_local(t)
        for name, group in self.groups.items():
            for src, dst in zip(group.tensors, clone.groups[name].tensors):
                dst.data = src.data.copy()
            clone.groups[name].frozen = group.frozen
        return clone

    def save_checkpoint(self, fh: TextIO) -> None:
        """Named parameter groups as (name, shape, row-major hex float64) records."""
        fh.write("#CONFIG " + json.dumps(self.config.to_dict(), sort_keys=True) + "\n")
        fh.write("#LOCALS " + ",".join(str(t) for t in sorted(self.local_nets)) + "\n")
        for name in sorted(self.groups):
            group = self.groups[name]
            fh.write(f"#GROUP {name} frozen={int(group.frozen)}\n")
            for i, t in enumerate(group.tensors):
                shape = "x".join(str(s) for s in t.shape)
                values = " ".join(float(v).hex() for v in t.data.ravel())
                fh.write(f"{name}/{i}\t{shape}\t{values}\n")


def load_checkpoint(fh: TextIO, semantics: SemanticTable) -> DinModel:
    """Rebuild a model from a checkpoint, bit-exactly."""
    config = None
    locals_needed: list[int] = []
    frozen: dict[str, bool] = {}
    tensors: dict[str, np.ndarray] = {}
    for raw in fh:
        line = raw.rstrip("\n")
        if not line:
            continue
        if line.startswith("#CONFIG "):
            config = ModelConfig(**json.loads(line[len("#CONFIG "):]))
        elif line.startswith("#LOCALS "):
            body = line[len("#LOCALS "):]
            locals_needed = [int(p) for p in body.split(",") if p]
        elif line.startswith("#GROUP "):
            parts = line[len("#GROUP "):].split(" ")
            frozen[parts[0]] = bool(int(parts[1].split("=")[1]))
        else:
            key, shape_text, values = line.split("\t")
            shape = tuple(int(s) for s in shape_text.split("x"))
            data = np.array([float.fromhex(v) for v in values.split(" ")])
            tensors[key] = data.reshape(shape)
    if config is None:
        raise ValueError("checkpoint is missing its #CONFIG header")
    model = DinModel(config, semantics)
    for t in locals_needed:
        model.ensure_local(t)
    for name, group in model.groups.items():
        group.frozen = frozen.get(name, False)
        for i, t in enumerate(group.tensors):
            stored = tensors[f"{name}/{i}"]
            if stored.shape != t.shape:
                raise ValueError(f"checkpoint tensor {name}/{i} has shape "
                                 f"{stored.shape}, expected {t.shape}")
            t.data = stored
    return model
