"""The DC-cell supernet.

A cell has six nodes: two aliases of the incoming activation (0 and 1), then
MAC, MHA, CNN and FFC in that order. Each computed node gathers its candidate
inputs through zero/skip edges, sums them, and applies a softmax mixture over
its operation menu.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .blocks import (
    HEAD_MENU,
    KERNEL_MENU,
    ConvModule,
    FeedForwardModule,
    Identity,
    MhsaModule,
)
from .nn import EVAL, Context, LayerNorm, Module
from .errors import ConfigurationError, ContractError
from .tensor import Tensor, softmax

INPUT_EDGE_CANDIDATES = ("zero", "skip")
SKIP = 1


@dataclass(frozen=True)
class OpChoice:
    """One operation on a node's menu: ``ff_half``, ``ff``, ``identity``, ``mhsa`` or ``conv``."""

    kind: str
    value: int | None = None

    def __post_init__(self):
        if self.kind not in ("ff_half", "ff", "identity", "mhsa", "conv"):
            raise ConfigurationError(f"unknown operation kind {self.kind!r}")
        if self.kind in ("mhsa", "conv") and self.value is None:
            raise ConfigurationError(f"{self.kind} needs a hyperparameter value")

    @property
    def label(self) -> str:
        if self.kind == "mhsa":
            return f"mhsa_h{self.value}"
        if self.kind == "conv":
            return f"conv_k{self.value}"
        return self.kind

    def to_dict(self) -> dict:
        if self.kind == "mhsa":
            return {"kind": "mhsa", "heads": self.value}
        if self.kind == "conv":
            return {"kind": "conv", "kernel": self.value}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "OpChoice":
        kind = d["kind"]
        if kind == "mhsa":
            return cls(kind, int(d["heads"]))
        if kind == "conv":
            return cls(kind, int(d["kernel"]))
        return cls(kind)


@dataclass(frozen=True)
class NodeSpec:
    index: int
    name: str
    input_candidates: tuple[int, ...]
    n_chosen: int
    op_menu: tuple[OpChoice, ...]

    @property
    def has_input_choice(self) -> bool:
        return len(self.input_candidates) > self.n_chosen

    @property
    def has_op_choice(self) -> bool:
        return len(self.op_menu) > 1

    def input_edge_id(self, source: int) -> str:
        return f"{self.name}.in{source}"

    @property
    def op_edge_id(self) -> str:
        return f"{self.name}.op"


NODE_NAMES = ("input0", "input1", "mac", "mha", "cnn", "ffc")


@dataclass(frozen=True)
class DcCellSpec:
    d_model: int
    d_hidden: int
    nodes: tuple[NodeSpec, ...]
    cell_final_norm: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        for node in self.computed_nodes:
            if any(i >= node.index for i in node.input_candidates):
                raise ConfigurationError(f"node {node.name}: inputs must precede the node")
            if not 1 <= node.n_chosen <= len(node.input_candidates):
                raise ConfigurationError(f"node {node.name}: n_chosen out of range")
            if not node.op_menu:
                raise ConfigurationError(f"node {node.name}: empty operation menu")
        for node in self.computed_nodes:
            for op in node.op_menu:
                _validate_op(op, self.d_model)

    @property
    def computed_nodes(self) -> tuple[NodeSpec, ...]:
        return tuple(n for n in self.nodes if n.input_candidates)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def edge_candidates(self) -> dict[str, tuple[str, ...]]:
        """Architecture edge id -> candidate labels, in a fixed order."""
        out: dict[str, tuple[str, ...]] = {}
        for node in self.computed_nodes:
            if node.has_input_choice:
                for i in node.input_candidates:
                    out[node.input_edge_id(i)] = INPUT_EDGE_CANDIDATES
            if node.has_op_choice:
                out[node.op_edge_id] = tuple(op.label for op in node.op_menu)
        return out

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_hidden": self.d_hidden,
            "cell_final_norm": self.cell_final_norm,
            "dropout": self.dropout,
            "nodes": [
                {
                    "index": n.index,
                    "name": n.name,
                    "input_candidates": list(n.input_candidates),
                    "n_chosen": n.n_chosen,
                    "op_menu": [op.to_dict() for op in n.op_menu],
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DcCellSpec":
        nodes = tuple(
            NodeSpec(
                index=int(n["index"]),
                name=n["name"],
                input_candidates=tuple(int(i) for i in n["input_candidates"]),
                n_chosen=int(n["n_chosen"]),
                op_menu=tuple(OpChoice.from_dict(o) for o in n["op_menu"]),
            )
            for n in d["nodes"]
        )
        return cls(
            d_model=int(d["d_model"]),
            d_hidden=int(d["d_hidden"]),
            nodes=nodes,
            cell_final_norm=bool(d.get("cell_final_norm", True)),
            dropout=float(d.get("dropout", 0.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _validate_op(op: OpChoice, d_model: int) -> None:
    if op.kind == "conv" and (op.value <= 0 or op.value % 2 == 0):
        raise ConfigurationError(f"conv kernel must be odd and positive, got {op.value}")
    if op.kind == "mhsa" and (op.value <= 0 or d_model % op.value):
        raise ConfigurationError(f"d_model {d_model} not divisible by {op.value} heads")


class AlphaStore:
    """Architecture logits grouped by edge id, plus the freeze flag."""

    def __init__(self, logits: dict[str, np.ndarray], candidates: dict[str, tuple[str, ...]]):
        if set(logits) != set(candidates):
            raise ConfigurationError("alpha logits and candidate labels disagree on edge ids")
        self.candidates = dict(candidates)
        self.tensors = {
            k: Tensor(np.array(logits[k], dtype=np.float64), requires_grad=True, name=k)
            for k in candidates
        }
        self.frozen = False

    @classmethod
    def zeros(cls, spec: DcCellSpec) -> "AlphaStore":
        cands = spec.edge_candidates()
        return cls({k: np.zeros(len(v)) for k, v in cands.items()}, cands)

    def __getitem__(self, edge: str) -> Tensor:
        return self.tensors[edge]

    def __contains__(self, edge: str) -> bool:
        return edge in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def weights(self, edge: str) -> np.ndarray:
        z = self.tensors[edge].data
        e = np.exp(z - z.max())
        return e / e.sum()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load(self, logits: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            arr = np.asarray(logits[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"alpha {k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def serialize(self) -> bytes:
        """Byte representation used for freeze/determinism comparisons."""
        parts = []
        for k in self.tensors:
            parts.append(k.encode() + b"\0")
            parts.append(self.tensors[k].data.astype("<f8").tobytes())
        return b"".join(parts)

    def entropy(self, edge: str) -> float:
        w = self.weights(edge)
        return float(-(w * np.log(np.clip(w, 1e-300, None))).sum())


def build_op(op: OpChoice, spec: DcCellSpec, rng: np.random.Generator, ffc_half_step: bool = True) -> Module:
    d, p = spec.d_model, spec.dropout
    if op.kind == "ff_half":
        return FeedForwardModule(d, spec.d_hidden, rng, half_step=True, dropout=p)
    if op.kind == "ff":
        return FeedForwardModule(d, spec.d_hidden, rng, half_step=ffc_half_step, dropout=p)
    if op.kind == "identity":
        return Identity()
    if op.kind == "mhsa":
        return MhsaModule(d, op.value, rng, dropout=p)
    return ConvModule(d, op.value, rng, dropout=p)


def build_dc_cell(
    d_model: int,
    d_hidden: int = 512,
    heads: tuple[int, ...] = HEAD_MENU,
    kernels: tuple[int, ...] = KERNEL_MENU,
    mac_menu: tuple[str, ...] = ("ff_half", "identity"),
    cell_final_norm: bool = True,
    dropout: float = 0.0,
) -> tuple[DcCellSpec, AlphaStore]:
    """The fixed DC-cell topology with zero-initialised architecture logits."""
    if not heads or not kernels or not mac_menu:
        raise ConfigurationError("operation menus must be non-empty")
    nodes = (
        NodeSpec(0, "input0", (), 0, (OpChoice("identity"),)),
        NodeSpec(1, "input1", (), 0, (OpChoice("identity"),)),
        NodeSpec(2, "mac", (0, 1), 1, tuple(OpChoice(k) for k in mac_menu)),
        NodeSpec(3, "mha", (0, 1, 2), 2, tuple(OpChoice("mhsa", h) for h in heads)),
        NodeSpec(4, "cnn", (1, 2, 3), 2, tuple(OpChoice("conv", k) for k in kernels)),
        NodeSpec(5, "ffc", (4,), 1, (OpChoice("ff"),)),
    )
    spec = DcCellSpec(d_model, d_hidden, nodes, cell_final_norm=cell_final_norm, dropout=dropout)
    return spec, AlphaStore.zeros(spec)


def mixed_op_forward(
    candidates: list[Module],
    alpha: Tensor | None,
    x: Tensor,
    mask=None,
    ctx: Context = EVAL,
) -> Tensor:
    """``sum_o softmax(alpha)_o * o(x)``; a single candidate needs no logits."""
    if not candidates:
        raise ConfigurationError("mixed operation has no candidates")
    if alpha is None:
        if len(candidates) != 1:
            raise ConfigurationError("several candidates need architecture logits")
        return candidates[0](x, mask, ctx)
    if alpha.shape != (len(candidates),):
        raise ConfigurationError(f"alpha shape {alpha.shape} vs {len(candidates)} candidates")
    w = softmax(alpha)
    out = None
    for i, op in enumerate(candidates):
        term = op(x, mask, ctx) * w[i]
        out = term if out is None else out + term
    return out


def gather_inputs(node: NodeSpec, state: dict[int, Tensor], alphas: AlphaStore | None) -> Tensor:
    total = None
    for i in node.input_candidates:
        if i not in state:
            raise ContractError(f"node {node.name}: predecessor {i} not computed yet")
        term = state[i]
        if node.has_input_choice:
            term = term * softmax(alphas[node.input_edge_id(i)])[SKIP]
        total = term if total is None else total + term
    return total


def node_forward(
    node: NodeSpec,
    state: dict[int, Tensor],
    spec: DcCellSpec,
    alphas: AlphaStore,
    ops: list[Module],
    mask=None,
    ctx: Context = EVAL,
) -> Tensor:
    x = gather_inputs(node, state, alphas)
    alpha = alphas[node.op_edge_id] if node.has_op_choice else None
    return mixed_op_forward(ops, alpha, x, mask, ctx)


class SuperCell(Module):
    """All candidate operations of one DC-cell with independent weights."""

    def __init__(
        self,
        spec: DcCellSpec,
        alphas: AlphaStore,
        rng: np.random.Generator,
        ffc_half_step: bool = True,
    ):
        self._spec = spec
        self._alphas = alphas
        for node in spec.computed_nodes:
            setattr(self, node.name, [build_op(op, spec, rng, ffc_half_step) for op in node.op_menu])
        self.final_norm = LayerNorm(spec.d_model) if spec.cell_final_norm else None

    @property
    def spec(self) -> DcCellSpec:
        return self._spec

    @property
    def alphas(self) -> AlphaStore:
        return self._alphas

    def candidates(self, node_name: str) -> list[Module]:
        return getattr(self, node_name)

    def __call__(self, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
        state: dict[int, Tensor] = {0: x, 1: x}
        for node in self._spec.computed_nodes:
            state[node.index] = node_forward(
                node, state, self._spec, self._alphas, self.candidates(node.name), mask, ctx
            )
        out = state[self._spec.nodes[-1].index]
        return self.final_norm(out) if self.final_norm is not None else out
