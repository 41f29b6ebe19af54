"""Causal decoder-only transformer over a canonical named-parameter tree.

Parameter names follow a fixed grammar that is the contract for selectors,
checkpoints, and reports:

    block{i}.ln1.{gamma|beta}
    block{i}.attn.{q|k|v|out}.{weight|bias}
    block{i}.ln2.{gamma|beta}
    block{i}.mlp.{fc1|fc2}.{weight|bias}
    final_ln.{gamma|beta}

Tree iteration order is depth order (block0 ... blockN-1, final_ln).
Blocks are pre-LN: x = x + attn(ln1(x)); x = x + mlp(ln2(x)); a final
layer norm follows the last block. Sequences are stored row-major as
[batch, positions, d_embed].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_NEG = np.float32(-1e9)

SUBLAYERS = ("ln1", "attn", "ln2", "mlp")


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 3
    n_heads: int = 1
    d_embed: int = 128
    context_positions: int = 60
    activation: str = "relu"  # relu | gelu
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_layers <= 0 or self.n_heads <= 0 or self.d_embed <= 0 or self.context_positions <= 0:
            raise ValueError(f"all counts must be positive: {self}")
        if self.d_embed % self.n_heads != 0:
            raise ValueError(f"d_embed {self.d_embed} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_embed // self.n_heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_embed

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_embed": self.d_embed,
            "context_positions": self.context_positions,
            "activation": self.activation,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


class ParameterTree:
    """Ordered name -> Tensor map addressing every weight of a model."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = ()):
        self._entries: dict[str, Tensor] = {}
        for name, t in entries:
            if name in self._entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._entries[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._entries[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def keys(self):
        return self._entries.keys()

    def get(self, name: str, default=None):
        return self._entries.get(name, default)

    def copy(self) -> "ParameterTree":
        return ParameterTree(self._entries.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._entries.items()}

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self._entries.values())

    def content_hash(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over the raw little-endian bytes of the named entries."""
        h = hashlib.sha256()
        for name in self.names() if names is None else names:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._entries[name].data).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"ParameterTree({len(self)} tensors, {self.n_params} params)"


def block_param_shapes(arch: ArchConfig, i: int) -> list[tuple[str, tuple[int, ...]]]:
    d, dm = arch.d_embed, arch.d_mlp
    p = f"block{i}"
    return [
        (f"{p}.ln1.gamma", (d,)),
        (f"{p}.ln1.beta", (d,)),
        (f"{p}.attn.q.weight", (d, d)),
        (f"{p}.attn.q.bias", (d,)),
        (f"{p}.attn.k.weight", (d, d)),
        (f"{p}.attn.k.bias", (d,)),
        (f"{p}.attn.v.weight", (d, d)),
        (f"{p}.attn.v.bias", (d,)),
        (f"{p}.attn.out.weight", (d, d)),
        (f"{p}.attn.out.bias", (d,)),
        (f"{p}.ln2.gamma", (d,)),
        (f"{p}.ln2.beta", (d,)),
        (f"{p}.mlp.fc1.weight", (d, dm)),
        (f"{p}.mlp.fc1.bias", (dm,)),
        (f"{p}.mlp.fc2.weight", (dm, d)),
        (f"{p}.mlp.fc2.bias", (d,)),
    ]


def tree_param_shapes(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for i in range(arch.n_layers):
        shapes.extend(block_param_shapes(arch, i))
    shapes.append(("final_ln.gamma", (arch.d_embed,)))
    shapes.append(("final_ln.beta", (arch.d_embed,)))
    return shapes


INIT_STD = 0.02


def init_transformer_tree(arch: ArchConfig, rng: np.random.Generator) -> ParameterTree:
    """Fresh tree: N(0, 0.02) weights, zero biases, identity layer norms."""
    tree = ParameterTree()
    for name, shape in tree_param_shapes(arch):
        if name.endswith(".gamma"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith((".beta", ".bias")):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        tree[name] = Tensor(data, requires_grad=True, name=name)
    return tree


def transformer_param_count(arch: ArchConfig) -> int:
    return sum(int(np.prod(s)) for _, s in tree_param_shapes(arch))


# ---------------------------------------------------------------------------
# layer selectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSelector:
    """Deterministic predicate over canonical parameter names."""

    name: str
    predicate: Callable[[str], bool] = field(compare=False)

    def __call__(self, param_name: str) -> bool:
        return bool(self.predicate(param_name))


def _is_layernorm(name: str) -> bool:
    return ".ln1." in name or ".ln2." in name or name.startswith("final_ln.")


attention_all = LayerSelector("attention", lambda n: ".attn." in n)
mlp_all = LayerSelector("mlp", lambda n: ".mlp." in n)
layernorm_all = LayerSelector("layernorm", _is_layernorm)
transformer_all = LayerSelector("transformer", lambda n: True)
nothing = LayerSelector("none", lambda n: False)


def single(block: int, sublayer: str) -> LayerSelector:
    """Selector for one sublayer of one block; 'final_ln' selects the final LN."""
    if sublayer == "final_ln" or block < 0:
        return LayerSelector("final_ln", lambda n: n.startswith("final_ln."))
    if sublayer not in SUBLAYERS:
        raise ValueError(f"unknown sublayer {sublayer!r}; expected one of {SUBLAYERS}")
    prefix = f"block{block}.{sublayer}."
    return LayerSelector(f"block{block}.{sublayer}", lambda n: n.startswith(prefix))


def depth_units(arch: ArchConfig) -> list[str]:
    """Canonical depth-ordered merge units: per-block sublayers then final_ln."""
    units = [f"block{i}.{sub}" for i in range(arch.n_layers) for sub in SUBLAYERS]
    units.append("final_ln")
    return units


def unit_selector(unit: str) -> LayerSelector:
    if unit == "final_ln":
        return single(-1, "final_ln")
    block, sub = unit.split(".")
    return single(int(block.removeprefix("block")), sub)


def depth_prefix(k: int, arch: ArchConfig) -> LayerSelector:
    units = depth_units(arch)[:k]
    prefixes = tuple(u + "." for u in units)
    return LayerSelector(f"depth:{k}", lambda n: n.startswith(prefixes) if prefixes else False)


_NAMED_SELECTORS = {
    "attention": attention_all,
    "mlp": mlp_all,
    "layernorm": layernorm_all,
    "transformer": transformer_all,
    "none": nothing,
    "attention+mlp": LayerSelector("attention+mlp", lambda n: ".attn." in n or ".mlp." in n),
}


def selector_by_name(name: str, arch: ArchConfig | None = None) -> LayerSelector:
    """Resolve a selector from its CLI/report spelling.

    Accepts the built-in names, 'depth:K', unit names like 'block0.attn',
    and 'final_ln'.
    """
    if name in _NAMED_SELECTORS:
        return _NAMED_SELECTORS[name]
    if name.startswith("depth:"):
        if arch is None:
            raise ValueError("depth:K selector needs an architecture")
        return depth_prefix(int(name.split(":", 1)[1]), arch)
    if name == "final_ln" or (name.startswith("block") and "." in name):
        return unit_selector(name)
    raise ValueError(f"unknown selector {name!r}")


def select(tree: ParameterTree, sel: LayerSelector) -> ParameterTree:
    """Sub-tree of entries whose names satisfy the selector, in tree order."""
    return ParameterTree((n, t) for n, t in tree.items() if sel(n))


def named_parameters(tree: ParameterTree) -> list[tuple[str, Tensor]]:
    return list(tree.items())


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

class DropoutPlan:
    """Counter-based dropout seeding: (seed, op index, step) -> mask.

    One plan is created per training step; each dropout call consumes the
    next op index, so identical (seed, step) pairs replay identical masks.
    """

    def __init__(self, rate: float, seed: int, step: int):
        self.rate = float(rate)
        self.seed = int(seed)
        self.step = int(step)
        self._op = 0

    def apply(self, x: Tensor) -> Tensor:
        if self.rate == 0.0:
            return x
        self._op += 1
        return ad.dropout(x, self.rate, (self.seed, self._op, self.step))


def _no_dropout(x: Tensor) -> Tensor:
    return x


def _causal_bias(n: int) -> np.ndarray:
    bias = np.zeros((n, n), dtype=np.float32)
    bias[np.triu_indices(n, k=1)] = MASK_NEG
    return bias


def attention_forward(
    X: Tensor,
    tree: ParameterTree,
    block: int,
    arch: ArchConfig,
    dropout_plan: DropoutPlan | None = None,
    key_mask: np.ndarray | None = None,
    capture: list | None = None,
) -> Tensor:
    """Causal multi-head self-attention for one block.

    X is [batch, n, d] (a [n, d] input is treated as batch 1). Output at
    position t depends only on positions <= t. Per head the computation is
    softmax(Q K^T / sqrt(d_head)) V followed by the output projection.
    """
    squeeze = X.data.ndim == 2
    if squeeze:
        X = ad.reshape(X, (1,) + X.shape)
    B, n, d = X.shape
    if n > arch.context_positions:
        raise SequenceTooLong(f"sequence length {n} exceeds context {arch.context_positions}")
    if d != arch.d_embed:
        raise ad.ShapeMismatch("attention_forward", X.shape, (B, n, arch.d_embed))
    H, dh = arch.n_heads, arch.d_head
    p = f"block{block}.attn"

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

    q = heads(X @ tree[f"{p}.q.weight"] + tree[f"{p}.q.bias"])
    k = heads(X @ tree[f"{p}.k.weight"] + tree[f"{p}.k.bias"])
    v = heads(X @ tree[f"{p}.v.weight"] + tree[f"{p}.v.bias"])

    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    bias = _causal_bias(n)[None, None, :, :]
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=np.float32)
        bias = bias + ((km - 1.0) * -MASK_NEG)[:, None, None, :]
    weights = ad.softmax(scores + Tensor(bias))
    if capture is not None:
        capture.append(weights.data.copy())
    drop = dropout_plan.apply if dropout_plan else _no_dropout
    mixed = ad.transpose(drop(weights) @ v, (0, 2, 1, 3))
    out = ad.reshape(mixed, (B, n, d)) @ tree[f"{p}.out.weight"] + tree[f"{p}.out.bias"]
    out = drop(out)
    if squeeze:
        out = ad.reshape(out, (n, d))
    return out


def block_forward(
    X: Tensor,
    tree: ParameterTree,
    block: int,
    arch: ArchConfig,
    dropout_plan: DropoutPlan | None = None,
    key_mask: np.ndarray | None = None,
    capture: list | None = None,
    attn_removed: bool = False,
) -> Tensor:
    """Pre-LN block: x + attn(ln1(x)), then x + mlp(ln2(x)).

    With attn_removed, the attention sublayer contributes exactly zero and
    the residual path carries the input through unchanged.
    """
    p = f"block{block}"
    if not attn_removed:
        h = ad.layer_norm(X, tree[f"{p}.ln1.gamma"], tree[f"{p}.ln1.beta"])
        X = X + attention_forward(h, tree, block, arch, dropout_plan, key_mask, capture)
    elif capture is not None:
        capture.append(None)
    h = ad.layer_norm(X, tree[f"{p}.ln2.gamma"], tree[f"{p}.ln2.beta"])
    act = ad.relu if arch.activation == "relu" else ad.gelu
    m = act(h @ tree[f"{p}.mlp.fc1.weight"] + tree[f"{p}.mlp.fc1.bias"])
    m = m @ tree[f"{p}.mlp.fc2.weight"] + tree[f"{p}.mlp.fc2.bias"]
    drop = dropout_plan.apply if dropout_plan else _no_dropout
    return X + drop(m)


def model_forward(
    X: Tensor,
    tree: ParameterTree,
    arch: ArchConfig,
    dropout_plan: DropoutPlan | None = None,
    key_mask: np.ndarray | None = None,
    capture: list | None = None,
    attn_removed: bool = False,
) -> Tensor:
    """Run all blocks then the final layer norm. X is [batch, n, d]."""
    for i in range(arch.n_layers):
        X = block_forward(X, tree, i, arch, dropout_plan, key_mask, capture, attn_removed)
    return ad.layer_norm(X, tree["final_ln.gamma"], tree["final_ln.beta"])
