"""Turn searched logits into a discrete cell, stack it, and count parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .encoder import Encoder
from .errors import ConfigurationError, DataError
from .nn import EVAL, Context, LayerNorm, Module, reset_op_ids
from .search_space import (
    SKIP,
    AlphaStore,
    DcCellSpec,
    OpChoice,
    SuperCell,
    build_dc_cell,
    build_op,
)
from .tensor import Tensor

FORMAT_VERSION = 1
CELL_NODES = ("mac", "mha", "cnn", "ffc")


@dataclass(frozen=True)
class NodeChoice:
    inputs: tuple[int, ...]
    op: OpChoice


@dataclass(frozen=True)
class ArchDescriptor:
    """One discrete cell: chosen inputs and operation for every computed node."""

    nodes: dict[str, NodeChoice]
    format_version: int = FORMAT_VERSION

    def validate(self, spec: DcCellSpec, strict: bool = False) -> None:
        """Chosen inputs must be candidates and ops must be on the menu.

        ``strict`` also requires exactly ``n_chosen`` inputs (what derivation
        emits); hand-edited ablations may keep fewer.
        """
        for node in spec.computed_nodes:
            if node.name not in self.nodes:
                raise ConfigurationError(f"descriptor lacks node {node.name}")
            choice = self.nodes[node.name]
            if not set(choice.inputs) <= set(node.input_candidates):
                raise ConfigurationError(
                    f"{node.name}: inputs {choice.inputs} not within candidates {node.input_candidates}"
                )
            if len(set(choice.inputs)) != len(choice.inputs) or not choice.inputs:
                raise ConfigurationError(f"{node.name}: inputs must be distinct and non-empty")
            n = len(choice.inputs)
            if n > node.n_chosen or (strict and n != node.n_chosen):
                raise ConfigurationError(f"{node.name}: {n} inputs chosen, n_chosen is {node.n_chosen}")
        extra = set(self.nodes) - {n.name for n in spec.computed_nodes}
        if extra:
            raise ConfigurationError(f"descriptor has unknown nodes {sorted(extra)}")

    def live_nodes(self) -> set[str]:
        """Computed nodes whose output reaches the cell output."""
        index = {name: i for i, name in enumerate(CELL_NODES, start=2)}
        by_index = {i: name for name, i in index.items()}
        live, frontier = set(), ["ffc"]
        while frontier:
            name = frontier.pop()
            if name in live:
                continue
            live.add(name)
            frontier += [by_index[i] for i in self.nodes[name].inputs if i in by_index]
        return live

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "nodes": {
                name: {"inputs": list(c.inputs), "op": c.op.to_dict()}
                for name, c in self.nodes.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        version = int(d.get("format_version", -1))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported descriptor format_version {version}")
        nodes = {
            name: NodeChoice(tuple(int(i) for i in c["inputs"]), OpChoice.from_dict(c["op"]))
            for name, c in d["nodes"].items()
        }
        return cls(nodes, version)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ArchDescriptor":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed architecture descriptor: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ArchDescriptor":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read descriptor {path}: {exc}") from exc
        return cls.from_json(text)


def builtin_arch(name: str) -> ArchDescriptor:
    """Checked-in descriptors: ``darts_conformer`` (searched cell) and ``conformer``."""
    try:
        text = resources.files("dcnas.archs").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise DataError(f"no built-in architecture named {name!r}") from exc
    return ArchDescriptor.from_json(text)


def _skip_margin(logits: np.ndarray) -> float:
    return float(logits[SKIP] - logits[1 - SKIP])


def derive_architecture(alphas: AlphaStore, spec: DcCellSpec) -> ArchDescriptor:
    """Keep the ``n_chosen`` strongest input edges and the argmax operation per node.

    Edge strength is the skip weight of the edge's zero/skip softmax, ranked
    through the logit margin (same order, no saturation to exactly 1.0). Ties
    go to the lowest candidate index.
    """
    nodes = {}
    for node in spec.computed_nodes:
        if node.has_input_choice:
            strength = [_skip_margin(alphas[node.input_edge_id(i)].data) for i in node.input_candidates]
            order = sorted(range(len(strength)), key=lambda j: (-strength[j], j))
            chosen = tuple(sorted(node.input_candidates[j] for j in order[: node.n_chosen]))
        else:
            chosen = tuple(node.input_candidates)
        if node.has_op_choice:
            op = node.op_menu[int(np.argmax(alphas[node.op_edge_id].data))]
        else:
            op = node.op_menu[0]
        nodes[node.name] = NodeChoice(chosen, op)
    return ArchDescriptor(nodes)


def one_hot_alphas(spec: DcCellSpec, desc: ArchDescriptor, margin: float = 40.0) -> AlphaStore:
    """Logits that put (numerically) all weight on ``desc``; ``margin`` is the logit gap."""
    store = AlphaStore.zeros(spec)
    h = margin / 2.0
    for node in spec.computed_nodes:
        choice = desc.nodes[node.name]
        if node.has_input_choice:
            for i in node.input_candidates:
                on = i in choice.inputs
                store[node.input_edge_id(i)].data = np.array([-h, h] if on else [h, -h])
        if node.has_op_choice:
            logits = np.full(len(node.op_menu), -h)
            logits[list(node.op_menu).index(choice.op)] = h
            store[node.op_edge_id].data = logits
    return store


class DiscreteCell(Module):
    """Straight-line cell: each node sums its chosen inputs and applies one op.

    Nodes whose output never reaches the cell output are not built.
    """

    def __init__(
        self,
        desc: ArchDescriptor,
        d_model: int,
        d_hidden: int,
        rng: np.random.Generator,
        cell_final_norm: bool = True,
        dropout: float = 0.0,
        ffc_half_step: bool = True,
    ):
        self._desc = desc
        self._spec = cell_spec_for(desc, d_model, d_hidden, cell_final_norm, dropout)
        desc.validate(self._spec)
        live = desc.live_nodes()
        for name in CELL_NODES:
            op = build_op(desc.nodes[name].op, self._spec, rng, ffc_half_step) if name in live else None
            setattr(self, name, op)
        self.final_norm = LayerNorm(d_model) if cell_final_norm else None

    @property
    def descriptor(self) -> ArchDescriptor:
        return self._desc

    def __call__(self, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
        state = {0: x, 1: x}
        for index, name in enumerate(CELL_NODES, start=2):
            if getattr(self, name) is None:
                continue
            inputs = self._desc.nodes[name].inputs
            h = state[inputs[0]]
            for i in inputs[1:]:
                h = h + state[i]
            state[index] = getattr(self, name)(h, mask, ctx)
        out = state[5]
        return self.final_norm(out) if self.final_norm is not None else out


def cell_spec_for(
    desc: ArchDescriptor, d_model: int, d_hidden: int, cell_final_norm: bool = True, dropout: float = 0.0
) -> DcCellSpec:
    """The DC-cell topology whose menus contain the descriptor's operations."""
    ops = {name: desc.nodes[name].op for name in CELL_NODES}
    for name, op in ops.items():
        expected = {"mac": ("ff_half", "identity"), "mha": ("mhsa",), "cnn": ("conv",), "ffc": ("ff",)}[name]
        if op.kind not in expected:
            raise ConfigurationError(f"{name}: operation {op.kind} not allowed (expected {expected})")
    spec, _ = build_dc_cell(
        d_model,
        d_hidden,
        heads=(ops["mha"].value,),
        kernels=(ops["cnn"].value,),
        mac_menu=(ops["mac"].kind,),
        cell_final_norm=cell_final_norm,
        dropout=dropout,
    )
    return spec


def discrete_cell_forward(cell: DiscreteCell, x: Tensor, mask=None, ctx: Context = EVAL) -> Tensor:
    return cell(x, mask, ctx)


def transplant(super_cell: SuperCell, desc: ArchDescriptor, ffc_half_step: bool = True) -> DiscreteCell:
    """Discrete cell whose weights are copies of the selected supernet candidates."""
    spec = super_cell.spec
    desc.validate(spec)
    cell = DiscreteCell(
        desc,
        spec.d_model,
        spec.d_hidden,
        np.random.default_rng(0),
        spec.cell_final_norm,
        spec.dropout,
        ffc_half_step,
    )
    for name in CELL_NODES:
        if getattr(cell, name) is None:
            continue
        node = spec.node(name)
        src = super_cell.candidates(name)[list(node.op_menu).index(desc.nodes[name].op)]
        getattr(cell, name).load_state_dict(src.state_dict())
    if cell.final_norm is not None:
        cell.final_norm.load_state_dict(super_cell.final_norm.state_dict())
    return cell


class StackedEncoder(Encoder):
    """``input projection -> n_layers discrete cells -> output head``; no weight sharing."""

    def __init__(
        self,
        desc: ArchDescriptor,
        n_layers: int,
        d_in: int,
        d_model: int,
        d_hidden: int,
        vocab: int,
        rng: np.random.Generator,
        cell_final_norm: bool = True,
        dropout: float = 0.0,
        ffc_half_step: bool = True,
        positional: bool = True,
    ):
        if n_layers < 1:
            raise ConfigurationError("n_layers must be at least 1")
        reset_op_ids()
        cells = [
            DiscreteCell(desc, d_model, d_hidden, rng, cell_final_norm, dropout, ffc_half_step)
            for _ in range(n_layers)
        ]
        super().__init__(d_in, d_model, vocab, cells, rng, positional)
        self._desc = desc

    @property
    def descriptor(self) -> ArchDescriptor:
        return self._desc


def build_stacked_encoder(desc: ArchDescriptor, n_layers: int, dims: dict, seed: int = 0) -> StackedEncoder:
    """``dims`` holds ``d_in``, ``d_model``, ``d_hidden``, ``vocab`` and optional flags."""
    rng = np.random.default_rng([seed, 11])
    return StackedEncoder(
        desc,
        n_layers,
        dims["d_in"],
        dims["d_model"],
        dims["d_hidden"],
        dims["vocab"],
        rng,
        cell_final_norm=dims.get("cell_final_norm", True),
        dropout=dims.get("dropout", 0.0),
        ffc_half_step=dims.get("ffc_half_step", True),
        positional=dims.get("positional", True),
    )


@dataclass
class ParamCount:
    total: int
    breakdown: dict[str, int]


def count_params(model: Module) -> ParamCount:
    """Exact scalar count, with a breakdown over the model's direct children."""
    total = sum(p.size for p in model.parameters())
    breakdown = {name: sum(p.size for p in child.parameters()) for name, child in model.named_children()}
    own = total - sum(breakdown.values())
    if own:
        breakdown["(own)"] = own
    return ParamCount(total, breakdown)


def render_arch(desc: ArchDescriptor) -> str:
    """Text DAG of a descriptor, one line per node."""
    names = {0: "input", 1: "input", 2: "MAC", 3: "MHA", 4: "CNN", 5: "FFC"}
    live = desc.live_nodes()
    lines = ["x ─┬─ node0 (input)", "   └─ node1 (input)"]
    for index, name in enumerate(CELL_NODES, start=2):
        c = desc.nodes[name]
        srcs = " + ".join(f"node{i}({names[i]})" for i in c.inputs)
        note = "" if name in live else "   [unused]"
        lines.append(f"node{index} {names[index]:<3} = {c.op.label:<10} ( {srcs} ){note}")
    lines.append("out       = LayerNorm(node5)")
    return "\n".join(lines)


def render_param_table(count: ParamCount) -> str:
    width = max([len(k) for k in count.breakdown] + [5])
    rows = [f"{'module':<{width}}  {'params':>10}", "-" * (width + 12)]
    rows += [f"{k:<{width}}  {v:>10,d}" for k, v in count.breakdown.items()]
    rows += ["-" * (width + 12), f"{'total':<{width}}  {count.total:>10,d}"]
    return "\n".join(rows)
