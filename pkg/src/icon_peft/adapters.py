"""PEFT methods, freeze policies and trainable-parameter accounting.

The centrepiece is :class:`ICoNAdapter`: down-project the MLP output, lay the
tokens out on their spatial grid, generate one ``K x K`` kernel per channel
*per sample* from the pooled feature map, convolve channel-wise, then GeLU and
up-project.  The remaining kinds are the baselines it is compared against.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .backbone import ViT, ViTConfig
from .errors import ConfigError
from .nn import Linear, Module, Parameter, _init
from .tensor import Tensor

KINDS = (
    "icon",
    "bottleneck_sequential",
    "adaptformer_parallel",
    "lora",
    "bitfit",
    "ln_only",
    "linear_probe",
    "full",
    "frozen",
)
PLACEMENTS = ("sequential", "parallel")
ADAPTER_KINDS = ("icon", "bottleneck_sequential", "adaptformer_parallel", "lora")


@dataclass
class AdapterRecipe:
    kind: str = "icon"
    bottleneck_dim: int = 64
    kernel_size: int = 3
    placement: str = "sequential"
    gamma_init: float = 1.0
    eq6_literal: bool = False
    lora_rank: int = 8
    kernel_bias_init: str = "zero"  # "dirac": kernel generator starts at identity kernels

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"recipe.kind {self.kind!r} is not one of {', '.join(KINDS)}")
        if self.bottleneck_dim < 1:
            raise ConfigError("recipe.bottleneck_dim must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"recipe.kernel_size must be odd and positive, got {self.kernel_size}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"recipe.placement {self.placement!r} is not one of {', '.join(PLACEMENTS)}")
        if self.kernel_bias_init not in ("zero", "dirac"):
            raise ConfigError(f"recipe.kernel_bias_init must be 'zero' or 'dirac', got {self.kernel_bias_init!r}")
        if self.lora_rank < 1:
            raise ConfigError("recipe.lora_rank must be >= 1")
        if self.kind != "icon" and (self.placement != "sequential" or self.kernel_size != 3):
            warnings.warn(f"placement and kernel_size are ignored for recipe kind {self.kind!r}", stacklevel=3)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# iCoN dynamic adapter


class ICoNAdapter(Module):
    def __init__(self, dim: int, recipe: AdapterRecipe, grid: int, rng=None, dtype=np.float32):
        d, K = recipe.bottleneck_dim, recipe.kernel_size
        self.down = Linear(dim, d, rng, dtype=dtype)
        self.kernel_gen = Linear(d, d * K * K, rng, dtype=dtype)
        if recipe.kernel_bias_init == "dirac":
            centre = np.zeros((d, K, K), dtype=dtype)
            centre[:, K // 2, K // 2] = 1.0
            self.kernel_gen.bias.data[...] = centre.reshape(-1)
        self.up = Linear(d, dim, rng, std=0.0, dtype=dtype)
        self.gamma = Parameter(np.full((1,), recipe.gamma_init, dtype=dtype), "scale")
        self.kernel_size = K
        self.grid = grid
        self.placement = recipe.placement
        self.eq6_literal = recipe.eq6_literal

    def forward(self, x: Tensor) -> Tensor:
        return icon_forward(x, self)

    def combine(self, x_tilde: Tensor, x_attn: Tensor) -> Tensor:
        if self.placement == "sequential":
            x_a = icon_forward(x_tilde, self)
            if self.eq6_literal:
                return self.gamma * x_a + x_attn
            return (x_tilde + x_attn) + self.gamma * x_a
        if self.placement == "parallel":
            return (x_tilde + x_attn) + self.gamma * icon_forward(x_attn, self)
        raise ConfigError(f"unknown adapter placement {self.placement!r}")


def generate_kernels(x_hat: Tensor, adapter: ICoNAdapter) -> Tensor:
    """``[B, Hg, Wg, d] -> [B, d, K, K]``: global average pool, then one linear map ``d -> d*K*K``."""
    B, _, _, d = x_hat.shape
    K = adapter.kernel_size
    pooled = x_hat.mean(axis=(1, 2))
    return adapter.kernel_gen(pooled).reshape(B, d, K, K)


def icon_forward(x: Tensor, adapter: ICoNAdapter) -> Tensor:
    B, M, _ = x.shape
    g = adapter.grid
    if M != g * g:
        raise ConfigError(f"iCoN adapter expects {g}x{g}={g * g} tokens, got {M}")
    down = adapter.down(x)
    d = down.shape[-1]
    x_hat = down.reshape(B, g, g, d)
    kernels = generate_kernels(x_hat, adapter)
    conv = T.conv2d_depthwise_dynamic(x_hat.transpose(0, 3, 1, 2), kernels)
    tokens = conv.transpose(0, 2, 3, 1).reshape(B, M, d)
    return adapter.up(T.gelu(tokens))


# ---------------------------------------------------------------------------
# static bottleneck adapters


def bottleneck_forward(x: Tensor, up: Linear, down: Linear) -> Tensor:
    """``up(gelu(down(x)))``; the caller adds it to the host branch."""
    return up(T.gelu(down(x)))


class BottleneckAdapter(Module):
    def __init__(self, dim: int, d: int, rng=None, dtype=np.float32):
        self.down = Linear(dim, d, rng, dtype=dtype)
        self.up = Linear(d, dim, rng, std=0.0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return bottleneck_forward(x, self.up, self.down)


class ParallelAdapter(BottleneckAdapter):
    """AdaptFormer: bottleneck beside the MLP branch with a learnable output scale."""

    def __init__(self, dim: int, d: int, scale_init: float = 1.0, rng=None, dtype=np.float32):
        super().__init__(dim, d, rng, dtype=dtype)
        self.scale = Parameter(np.full((1,), scale_init, dtype=dtype), "scale")

    def combine(self, x_tilde: Tensor, x_attn: Tensor) -> Tensor:
        return (x_tilde + x_attn) + self.scale * self.forward(x_attn)


# ---------------------------------------------------------------------------
# LoRA


def lora_apply(weight: Tensor, lora_a: Tensor, lora_b: Tensor, x: Tensor) -> Tensor:
    """``x @ (W + A B)`` evaluated as ``x @ W + (x @ A) @ B``."""
    rank = lora_a.shape[-1]
    if rank > weight.shape[0]:
        raise ConfigError(f"LoRA rank {rank} exceeds projection width {weight.shape[0]}")
    return T.matmul(x, weight) + T.matmul(T.matmul(x, lora_a), lora_b)


class LoRALinear(Module):
    """Wraps a frozen :class:`Linear`; keeps its parameter names so backbone checkpoints still load."""

    def __init__(self, base: Linear, rank: int, rng=None, dtype=np.float32):
        d_in, d_out = base.weight.shape
        if rank > min(d_in, d_out):
            raise ConfigError(f"recipe.lora_rank {rank} exceeds projection width {min(d_in, d_out)}")
        self.weight = base.weight
        self.bias = base.bias
        self.lora_a = Parameter(_init(rng, (d_in, rank), 1.0 / np.sqrt(d_in), dtype), "weight")
        self.lora_b = Parameter(np.zeros((rank, d_out), dtype=dtype), "weight")

    def forward(self, x: Tensor) -> Tensor:
        y = lora_apply(self.weight, self.lora_a, self.lora_b, x)
        return y + self.bias if self.bias is not None else y


# ---------------------------------------------------------------------------
# assembly


def attach(model: ViT, recipe: AdapterRecipe, seed: int | None = 0, init: bool = True) -> ViT:
    """Install the recipe's modules into every block of ``model`` (in place)."""
    cfg = model.cfg
    D, d, dtype = cfg.embed_dim, recipe.bottleneck_dim, model.dtype
    # own stream, so the backbone weights do not depend on the recipe
    rng = np.random.default_rng([0 if seed is None else seed, 1]) if init else None
    for block in model.blocks:
        if recipe.kind == "icon":
            block.adapter = ICoNAdapter(D, recipe, cfg.grid, rng, dtype=dtype)
        elif recipe.kind == "bottleneck_sequential":
            block.attn_adapter = BottleneckAdapter(D, d, rng, dtype=dtype)
            block.mlp_adapter = BottleneckAdapter(D, d, rng, dtype=dtype)
        elif recipe.kind == "adaptformer_parallel":
            block.adapter = ParallelAdapter(D, d, recipe.gamma_init, rng, dtype=dtype)
        elif recipe.kind == "lora":
            block.attn.q = LoRALinear(block.attn.q, recipe.lora_rank, rng, dtype=dtype)
            block.attn.v = LoRALinear(block.attn.v, recipe.lora_rank, rng, dtype=dtype)
    return model


def build_model(
    cfg: ViTConfig,
    recipe: AdapterRecipe | None = None,
    seed: int | None = 0,
    dtype=np.float32,
    init: bool = True,
) -> ViT:
    """Backbone plus recipe modules.  ``init=False`` gives a zero-filled, shape-only model for counting."""
    model = ViT(cfg, seed=seed, dtype=dtype, init=init)
    if recipe is not None:
        attach(model, recipe, seed=seed, init=init)
    return model


# ---------------------------------------------------------------------------
# freezing and accounting


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple
    trainable: bool
    owner: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def owner_of(name: str) -> str:
    if name.startswith("head."):
        return "head"
    if "adapter" in name or ".lora_" in name:
        return "adapter"
    return "backbone"


class ParameterRegistry:
    """Every model parameter exactly once, with its trainable flag and owner."""

    def __init__(self, model: Module, trainable: Iterable[str]):
        trainable = set(trainable)
        self.params: dict[str, Parameter] = {}
        self.entries: list[ParamEntry] = []
        for name, p in model.named_parameters():
            if name in self.params:
                raise ConfigError(f"parameter {name} registered twice")
            self.params[name] = p
            self.entries.append(ParamEntry(name, tuple(p.shape), name in trainable, owner_of(name)))
        unknown = trainable - set(self.params)
        if unknown:
            raise ConfigError(f"unknown parameters marked trainable: {sorted(unknown)}")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def count(self, scope: str = "all") -> int:
        return count_parameters(self, scope)

    def ratio(self) -> float:
        """Trainable share of all parameters, in percent."""
        total = self.count("all")
        return 100.0 * self.count("trainable") / total if total else 0.0

    def trainable(self) -> dict[str, Parameter]:
        return {e.name: self.params[e.name] for e in self.entries if e.trainable}

    def frozen(self) -> dict[str, Parameter]:
        return {e.name: self.params[e.name] for e in self.entries if not e.trainable}

    def by_owner(self) -> dict[str, dict[str, int]]:
        out = {owner: {"total": 0, "trainable": 0} for owner in ("backbone", "adapter", "head")}
        for e in self.entries:
            out[e.owner]["total"] += e.size
            if e.trainable:
                out[e.owner]["trainable"] += e.size
        return out

    def report(self) -> dict:
        return {
            "total": self.count("all"),
            "trainable": self.count("trainable"),
            "backbone_trainable": self.count("backbone_trainable"),
            "ratio": self.ratio(),
            "by_owner": self.by_owner(),
        }


def count_parameters(registry: ParameterRegistry, scope: str = "all") -> int:
    """``all``, ``trainable``, or ``backbone_trainable`` (trainable excluding the task head)."""
    if scope == "all":
        return sum(e.size for e in registry.entries)
    if scope == "trainable":
        return sum(e.size for e in registry.entries if e.trainable)
    if scope == "backbone_trainable":
        return sum(e.size for e in registry.entries if e.trainable and e.owner != "head")
    raise ConfigError(f"unknown count scope {scope!r}")


def _selects(kind: str, name: str, p: Parameter) -> bool:
    owner = owner_of(name)
    if owner == "head":
        return kind != "frozen"
    if kind in ADAPTER_KINDS:
        return owner == "adapter"
    if kind == "bitfit":
        return name.endswith(".bias")
    if kind == "ln_only":
        return p.kind == "norm"
    if kind == "full":
        return True
    if kind in ("linear_probe", "frozen"):
        return False
    raise ConfigError(f"unknown recipe kind {kind!r}")


def apply_freeze_policy(model: Module, recipe: AdapterRecipe | str) -> ParameterRegistry:
    """Set ``requires_grad`` per the recipe and return the resulting registry."""
    kind = recipe.kind if isinstance(recipe, AdapterRecipe) else recipe
    if kind not in KINDS:
        raise ConfigError(f"unknown recipe kind {kind!r}")
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad = _selects(kind, name, p)
        if p.requires_grad:
            trainable.append(name)
    return ParameterRegistry(model, trainable)


def registry_for(cfg: ViTConfig, recipe: AdapterRecipe) -> ParameterRegistry:
    """Shape-only registry; no weights are initialised, so this is cheap even for ViT-B sizes."""
    return apply_freeze_policy(build_model(cfg, recipe, init=False), recipe)
