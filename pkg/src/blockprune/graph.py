"""Block-level network description, validation, surgery, and persistence.

A model is an ordered list of blocks (stem, units, transitions, classifier
head) plus edges describing topology. Together with a :class:`WeightStore`
of named tensors it is the complete, executable description of a network
and doubles as the on-disk checkpoint format (``graph.json`` +
``weights.bin``).

All functions here are pure: surgery returns new graph/store objects and
never mutates its inputs, so everything is safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import SurgeryError

GRAPH_SCHEMA = "blockprune/graph-v1"
WEIGHTS_MAGIC = b"BPWTS001"


class BlockKind(str, Enum):
    STEM = "stem"
    CHAIN_UNIT = "conv_bn_relu_chain_unit"
    RESIDUAL_UNIT = "residual_unit"
    DENSE_UNIT = "dense_unit"
    TRANSITION = "transition"
    HEAD = "classifier_head"


#: Kinds that are never candidates for removal, regardless of shape.
NEVER_PRUNABLE = frozenset({BlockKind.STEM, BlockKind.TRANSITION, BlockKind.HEAD})

#: Tensor names owned by each parametric layer op (torch conventions).
PARAM_SUFFIXES = {
    "conv": ("weight",),
    "bn": ("weight", "bias", "running_mean", "running_var"),
    "linear": ("weight", "bias"),
}


@dataclass(frozen=True)
class LayerSpec:
    """One primitive layer inside a block.

    ``op`` is one of ``conv | bn | relu | avgpool | gap | linear``.
    Parametric ops carry a ``name`` used to derive WeightStore keys;
    stateless ops (relu, pooling) leave it empty.
    """

    op: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = False

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.op == "conv":
            return {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel)}
        if self.op == "bn":
            c = (self.in_channels,)
            return {"weight": c, "bias": c, "running_mean": c, "running_var": c}
        if self.op == "linear":
            return {"weight": (self.out_channels, self.in_channels), "bias": (self.out_channels,)}
        return {}

    def to_json(self) -> dict:
        return {
            "op": self.op,
            "name": self.name,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "bias": self.bias,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        return cls(**obj)


Shape = tuple[int, int, int]


@dataclass(frozen=True)
class Block:
    """One unit of analysis and surgery.

    ``out_shape`` is the feature tensor available *after* the block; for
    dense units that is the running concatenation including the block's own
    ``produces_channels`` new channels.
    """

    id: int
    kind: BlockKind
    in_shape: Shape
    out_shape: Shape
    body: tuple[LayerSpec, ...]
    shortcut: tuple[LayerSpec, ...] = ()
    produces_channels: int = 0

    @property
    def param_names(self) -> list[str]:
        names = []
        for ls in self.body + self.shortcut:
            for suffix in PARAM_SUFFIXES.get(ls.op, ()):
                names.append(f"block{self.id}.{ls.name}.{suffix}")
        return names

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for ls in self.body + self.shortcut:
            for suffix, shape in ls.param_shapes().items():
                shapes[f"block{self.id}.{ls.name}.{suffix}"] = shape
        return shapes

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "produces_channels": self.produces_channels,
            "body": [ls.to_json() for ls in self.body],
            "shortcut": [ls.to_json() for ls in self.shortcut],
            "param_names": self.param_names,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Block":
        return cls(
            id=obj["id"],
            kind=BlockKind(obj["kind"]),
            in_shape=tuple(obj["in_shape"]),
            out_shape=tuple(obj["out_shape"]),
            body=tuple(LayerSpec.from_json(l) for l in obj["body"]),
            shortcut=tuple(LayerSpec.from_json(l) for l in obj["shortcut"]),
            produces_channels=obj.get("produces_channels", 0),
        )


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str  # sequential | identity_skip | concat


@dataclass(frozen=True)
class BlockGraph:
    blocks: tuple[Block, ...]
    edges: tuple[Edge, ...]
    num_classes: int
    input_shape: Shape

    @property
    def dataset_meta(self) -> tuple[int, Shape]:
        return self.num_classes, self.input_shape

    def block(self, block_id: int) -> Block:
        return self.blocks[block_id]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for b in self.blocks:
            shapes.update(b.param_shapes())
        return shapes

    def to_json(self) -> dict:
        return {
            "schema": GRAPH_SCHEMA,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "blocks": [b.to_json() for b in self.blocks],
            "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind} for e in self.edges],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BlockGraph":
        return cls(
            blocks=tuple(Block.from_json(b) for b in obj["blocks"]),
            edges=tuple(Edge(e["src"], e["dst"], e["kind"]) for e in obj["edges"]),
            num_classes=obj["num_classes"],
            input_shape=tuple(obj["input_shape"]),
        )


# ---------------------------------------------------------------------------
# shape propagation


def layer_out_shape(spec: LayerSpec, shape: Shape) -> Shape:
    c, h, w = shape
    if spec.op == "conv":
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        return (spec.out_channels, ho, wo)
    if spec.op in ("bn", "relu"):
        return shape
    if spec.op == "avgpool":
        return (c, h // spec.kernel, w // spec.kernel)
    if spec.op == "gap":
        return (c, 1, 1)
    if spec.op == "linear":
        return (spec.out_channels, 1, 1)
    raise ValueError(f"unknown layer op {spec.op!r}")


def iter_layers(block: Block):
    """Yield ``(layer, in_shape, out_shape)`` for every layer in the block.

    Body layers chain from ``block.in_shape``; shortcut layers chain from
    ``block.in_shape`` independently.
    """
    shape = block.in_shape
    for ls in block.body:
        out = layer_out_shape(ls, shape)
        yield ls, shape, out
        shape = out
    shape = block.in_shape
    for ls in block.shortcut:
        out = layer_out_shape(ls, shape)
        yield ls, shape, out
        shape = out


def block_out_shape(block: Block, in_shape: Shape) -> Shape:
    shape = in_shape
    for ls in block.body:
        shape = layer_out_shape(ls, shape)
    if block.kind is BlockKind.DENSE_UNIT:
        return (in_shape[0] + block.produces_channels, in_shape[1], in_shape[2])
    return shape


# ---------------------------------------------------------------------------
# edge construction


def build_edges(blocks: tuple[Block, ...]) -> tuple[Edge, ...]:
    """Derive the edge list from block kinds.

    Every block receives a sequential edge from its predecessor. Each
    residual unit additionally receives an identity_skip edge (the skip path
    joined at the unit's output; projection details live in the block's
    shortcut layers). Within a dense stage, every consumer receives concat
    edges from all in-stage producers other than its immediate predecessor.
    """
    edges = [Edge(i - 1, i, "sequential") for i in range(1, len(blocks))]
    for b in blocks:
        if b.kind is BlockKind.RESIDUAL_UNIT:
            edges.append(Edge(b.id - 1, b.id, "identity_skip"))
    for entry, members in _dense_stages(blocks):
        producers = [entry]
        for m in members:
            for p in producers[:-1]:
                edges.append(Edge(p, m, "concat"))
            producers.append(m)
    return tuple(edges)


def _dense_stages(blocks: tuple[Block, ...]):
    """Yield (entry_id, [member ids]) for each dense stage.

    A stage is entered at a stem or transition whose successor is a dense
    unit; its members are the following dense units plus the terminating
    transition or head (which consumes the full concatenation).
    """
    i = 0
    n = len(blocks)
    while i < n:
        b = blocks[i]
        if b.kind in (BlockKind.STEM, BlockKind.TRANSITION) and i + 1 < n and blocks[i + 1].kind is BlockKind.DENSE_UNIT:
            members = []
            j = i + 1
            while j < n and blocks[j].kind is BlockKind.DENSE_UNIT:
                members.append(blocks[j].id)
                j += 1
            if j < n and blocks[j].kind in (BlockKind.TRANSITION, BlockKind.HEAD):
                members.append(blocks[j].id)
            yield b.id, members
            i = j
        else:
            i += 1


# ---------------------------------------------------------------------------
# validation


def validate_graph(graph: BlockGraph) -> list[str]:
    """Check every structural invariant; returns a list of violations.

    An empty list means the graph is valid. Violations are data, not
    exceptions.
    """
    v: list[str] = []
    blocks = graph.blocks
    if not blocks:
        return ["graph has no blocks"]

    stems = [b.id for b in blocks if b.kind is BlockKind.STEM]
    heads = [b.id for b in blocks if b.kind is BlockKind.HEAD]
    if len(stems) != 1:
        v.append(f"expected exactly one stem, found {len(stems)}")
    if len(heads) != 1:
        v.append(f"expected exactly one classifier_head, found {len(heads)}")
    if stems and stems[0] != 0:
        v.append("stem must be block 0")
    if heads and heads[0] != blocks[-1].id:
        v.append("classifier_head must be the last block")

    for i, b in enumerate(blocks):
        if b.id != i:
            v.append(f"block ids not consecutive at position {i} (found id {b.id})")

    seen: dict[str, int] = {}
    for b in blocks:
        for name in b.param_names:
            if name in seen:
                v.append(f"param owned twice: {name} (blocks {seen[name]} and {b.id})")
            seen[name] = b.id

    # shape chaining and per-block consistency
    prev_out = graph.input_shape
    for b in blocks:
        if b.in_shape != prev_out:
            v.append(f"block {b.id} in_shape {b.in_shape} != upstream output {prev_out}")
        try:
            computed = block_out_shape(b, b.in_shape)
        except ValueError as e:
            v.append(f"block {b.id}: {e}")
            computed = b.out_shape
        if computed != b.out_shape:
            v.append(f"block {b.id} out_shape {b.out_shape} != computed {computed}")
        if b.body and b.body[0].op in ("conv", "bn") and b.body[0].in_channels != b.in_shape[0]:
            v.append(f"block {b.id} first layer expects {b.body[0].in_channels} channels, input has {b.in_shape[0]}")
        prev_out = b.out_shape

    if blocks[-1].kind is BlockKind.HEAD and blocks[-1].out_shape[0] != graph.num_classes:
        v.append(f"head outputs {blocks[-1].out_shape[0]} classes, dataset has {graph.num_classes}")

    # residual edge invariant
    kinds = {(e.src, e.dst, e.kind) for e in graph.edges}
    for b in blocks:
        if b.kind is BlockKind.RESIDUAL_UNIT:
            if (b.id - 1, b.id, "sequential") not in kinds or (b.id - 1, b.id, "identity_skip") not in kinds:
                v.append(f"residual block {b.id} missing sequential+identity_skip edge pair")

    # dense stage channel bookkeeping
    for entry_id, members in _dense_stages(blocks):
        running = blocks[entry_id].out_shape[0]
        for mid in members:
            m = blocks[mid]
            if m.in_shape[0] != running:
                v.append(
                    f"block {mid} input channels {m.in_shape[0]} disagree with surviving producers (expected {running})"
                )
            if m.kind is BlockKind.DENSE_UNIT:
                running += m.produces_channels
    return v


# ---------------------------------------------------------------------------
# prunability and surgery


def prunable_blocks(graph: BlockGraph) -> frozenset[int]:
    """Ids of blocks that can be removed without breaking tensor shapes.

    Residual and chain units are prunable iff they preserve their shape
    (identity-skip units); shape-changing units (projection shortcuts,
    downsampling) are excluded. Dense units are always prunable because
    downstream inputs are re-sliced by the surgery.
    """
    out = set()
    for b in graph.blocks:
        if b.kind in NEVER_PRUNABLE:
            continue
        if b.kind is BlockKind.DENSE_UNIT:
            out.add(b.id)
        elif b.kind in (BlockKind.RESIDUAL_UNIT, BlockKind.CHAIN_UNIT):
            if b.in_shape == b.out_shape:
                out.add(b.id)
    return frozenset(out)


def reindex_map(n_blocks: int, removed: set[int] | frozenset[int]) -> dict[int, int]:
    """Old-id -> new-id map after removing ``removed`` and renumbering densely."""
    mapping = {}
    new_id = 0
    for old in range(n_blocks):
        if old in removed:
            continue
        mapping[old] = new_id
        new_id += 1
    return mapping


def _consumer_masks(graph: BlockGraph, removed: set[int]) -> dict[int, np.ndarray]:
    """Boolean keep-masks over input channels for dense-stage consumers.

    A removed dense unit's output occupies channels
    ``[unit.in_channels, unit.in_channels + produces)`` of every downstream
    in-stage concatenation; those positions are marked False for each later
    consumer (dense units, the stage's transition, or the head).
    """
    masks: dict[int, np.ndarray] = {}
    blocks = graph.blocks
    for entry_id, members in _dense_stages(blocks):
        removed_units = [blocks[m] for m in members if m in removed and blocks[m].kind is BlockKind.DENSE_UNIT]
        if not removed_units:
            continue
        for mid in members:
            if mid in removed:
                continue
            consumer = blocks[mid]
            mask = np.ones(consumer.in_shape[0], dtype=bool)
            for unit in removed_units:
                if unit.id < mid:
                    off = unit.in_shape[0]
                    mask[off : off + unit.produces_channels] = False
            if not mask.all():
                masks[mid] = mask
    return masks


def _slice_input_channels(block: Block, mask: np.ndarray) -> Block:
    """Shrink a dense consumer's input-facing layers to the kept channels."""
    kept = int(mask.sum())
    new_body = []
    resliced = False
    for ls in block.body:
        if not resliced and ls.op == "bn":
            ls = replace(ls, in_channels=kept, out_channels=kept)
        elif not resliced and ls.op in ("conv", "linear"):
            ls = replace(ls, in_channels=kept)
            resliced = True
        new_body.append(ls)
    return replace(block, body=tuple(new_body))


def prune_blocks(
    graph: BlockGraph, weights: "WeightStore", ids: set[int] | frozenset[int]
) -> tuple[BlockGraph, "WeightStore"]:
    """Remove the given blocks and return the re-indexed graph and weights.

    Surviving weight values are bit-identical copies of the originals;
    dense removals additionally slice the removed channels out of every
    downstream consumer's input-facing tensors (batch-norm vectors plus the
    first convolution or the head's linear layer). No re-scaling or
    re-normalization is ever applied.
    """
    removed = set(int(i) for i in ids)
    n = len(graph.blocks)
    for i in removed:
        if i < 0 or i >= n:
            raise SurgeryError(f"block id {i} out of range (graph has {n} blocks)")
    legal = prunable_blocks(graph)
    illegal = removed - set(legal)
    if illegal:
        raise SurgeryError(f"blocks not prunable: {sorted(illegal)}")

    masks = _consumer_masks(graph, removed)
    mapping = reindex_map(n, removed)

    new_blocks: list[Block] = []
    new_entries: dict[str, np.ndarray] = {}
    prev_out = graph.input_shape
    for old in graph.blocks:
        if old.id in removed:
            continue
        mask = masks.get(old.id)
        block = _slice_input_channels(old, mask) if mask is not None else old
        new_id = mapping[old.id]
        out_shape = block_out_shape(block, prev_out)
        block = replace(block, id=new_id, in_shape=prev_out, out_shape=out_shape)
        new_blocks.append(block)

        resliced = False
        for ls in block.body + block.shortcut:
            for suffix in PARAM_SUFFIXES.get(ls.op, ()):
                src = weights[f"block{old.id}.{ls.name}.{suffix}"]
                if mask is not None and not resliced and ls.op == "bn":
                    arr = np.ascontiguousarray(src[mask])
                elif mask is not None and not resliced and ls.op in ("conv", "linear") and suffix == "weight":
                    arr = np.ascontiguousarray(src[:, mask])
                else:
                    arr = src.copy()
                new_entries[f"block{new_id}.{ls.name}.{suffix}"] = arr
            if mask is not None and not resliced and ls.op in ("conv", "linear"):
                resliced = True
        prev_out = block.out_shape

    pruned = BlockGraph(
        blocks=tuple(new_blocks),
        edges=build_edges(tuple(new_blocks)),
        num_classes=graph.num_classes,
        input_shape=graph.input_shape,
    )
    violations = validate_graph(pruned)
    if violations:
        raise SurgeryError(f"surgery produced an invalid graph: {violations}")
    return pruned, WeightStore(new_entries)


# ---------------------------------------------------------------------------
# weight container


@dataclass
class WeightStore:
    """Named-tensor container for all learnable parameters of a model.

    Values are numpy arrays (float32 in practice). Persistence is a single
    file: magic, a JSON index mapping name -> dtype/shape/offset/length, and
    a payload of concatenated row-major little-endian tensors. Round-trips
    are bit-exact.
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.entries.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.entries):
            arr = self.entries[name]
            h.update(name.encode())
            h.update(arr.dtype.str.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def equals(self, other: "WeightStore") -> bool:
        if set(self.entries) != set(other.entries):
            return False
        return all(
            a.shape == other.entries[k].shape and np.array_equal(a, other.entries[k], equal_nan=True)
            for k, a in self.entries.items()
        )

    def save(self, path: str | Path) -> None:
        index = {}
        chunks = []
        offset = 0
        for name in sorted(self.entries):
            arr = np.ascontiguousarray(self.entries[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            payload = arr.tobytes()
            index[name] = {
                "dtype": arr.dtype.str if arr.dtype.byteorder != "=" else "<" + arr.dtype.str[1:],
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(payload),
            }
            chunks.append(payload)
            offset += len(payload)
        header = json.dumps({"schema": "blockprune/weights-v1", "entries": index}).encode()
        with open(path, "wb") as f:
            f.write(WEIGHTS_MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for c in chunks:
                f.write(c)

    @classmethod
    def load(cls, path: str | Path) -> "WeightStore":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != WEIGHTS_MAGIC:
                raise ValueError(f"{path}: not a weight container (bad magic)")
            (header_len,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(header_len))
            payload = f.read()
        entries = {}
        for name, meta in header["entries"].items():
            start, length = meta["offset"], meta["length"]
            raw = payload[start : start + length]
            if len(raw) != length:
                raise ValueError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
            entries[name] = arr
        return cls(entries)


# ---------------------------------------------------------------------------
# checkpoint helpers


def save_graph(graph: BlockGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph.to_json(), indent=1))


def load_graph(path: str | Path) -> BlockGraph:
    return BlockGraph.from_json(json.loads(Path(path).read_text()))


def save_checkpoint(graph: BlockGraph, weights: WeightStore, directory: str | Path) -> Path:
    """Write ``graph.json`` + ``weights.bin`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_graph(graph, d / "graph.json")
    weights.save(d / "weights.bin")
    return d


def load_checkpoint(directory: str | Path) -> tuple[BlockGraph, WeightStore]:
    d = Path(directory)
    graph = load_graph(d / "graph.json")
    weights = WeightStore.load(d / "weights.bin")
    missing = set(graph.param_shapes()) - set(weights.entries)
    if missing:
        raise ValueError(f"checkpoint {d} missing tensors: {sorted(missing)[:5]}")
    return graph, weights
