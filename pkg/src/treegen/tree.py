"""Tree data model: configuration schema, node records, and structural queries.

A tree is grown layer by layer. Layer 0 is the root holding the system prompt;
layer i (1-based) holds up to ``branching_i`` children per layer-(i-1) parent.
In SFT mode odd layers are questions and even layers answers; in PT mode every
layer is a free continuation. Node ids are structural: the child-index path
from the root (e.g. ``"0.3.1"``), which makes ordering, checkpointing, and
resume deterministic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, IncompleteTreeError
from .fnv import hash_text

log = logging.getLogger(__name__)

ROOT_ID = "root"

# Default sampling temperatures when a layer does not set one explicitly:
# exploratory for questions/continuations, steadier for answers.
QUESTION_TEMPERATURE = 1.0
ANSWER_TEMPERATURE = 0.7


class Mode(str, Enum):
    SFT = "sft"
    PT = "pt"


class Role(str, Enum):
    ROOT = "root"
    QUESTION = "question"
    ANSWER = "answer"
    CONTINUATION = "continuation"


class TreeShape(str, Enum):
    WIDE = "wide-tree"        # branching >= 2 at layer 1, exactly 1 everywhere deeper
    BALANCE = "balance-tree"  # branching > 1 somewhere past layer 1
    CHAIN = "chain"           # branching 1 everywhere; schedules like a wide tree


def role_for_layer(mode: Mode, layer_index: int) -> Role:
    """Expected role of 1-based layer ``layer_index`` under ``mode``."""
    if mode is Mode.PT:
        return Role.CONTINUATION
    return Role.QUESTION if layer_index % 2 == 1 else Role.ANSWER


@dataclass(frozen=True)
class LayerSpec:
    """Per-layer recipe: how many children, how long, and how to sample them."""

    branching: int
    max_tokens: int
    role: Role
    temperature: float
    stop_markers: tuple[str, ...] = ()


@dataclass(frozen=True)
class TreeConfig:
    """Full generation recipe for one tree run."""

    mode: Mode
    system_prompt: str
    layers: tuple[LayerSpec, ...]
    oversample_factor: float = 2.0
    mmr_lambda: float = 0.5
    dedup_threshold: float = 0.95
    seed: int = 0
    template_id: str = "plain"

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def branching(self) -> tuple[int, ...]:
        return tuple(layer.branching for layer in self.layers)

    def layer(self, layer_index: int) -> LayerSpec:
        """1-based layer lookup."""
        return self.layers[layer_index - 1]


def classify_shape(branching: Sequence[int]) -> TreeShape:
    rest = branching[1:]
    if branching and branching[0] >= 2 and all(n == 1 for n in rest):
        return TreeShape.WIDE
    if any(n > 1 for n in rest):
        return TreeShape.BALANCE
    return TreeShape.CHAIN


@dataclass
class ValidationReport:
    """Hard violations plus advisory warnings; validation never raises."""

    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    shape: TreeShape | None = None

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_dict(self) -> dict:
        return {
            "errors": list(self.errors),
            "warnings": list(self.warnings),
            "shape": self.shape.value if self.shape else None,
        }


def validate_config(config: TreeConfig) -> ValidationReport:
    """Check structural invariants; budget-shape issues are warnings only."""
    report = ValidationReport()
    err = report.errors.append
    warn = report.warnings.append

    if config.depth == 0:
        err("config has no layers")
        return report
    if config.mode is Mode.SFT and config.depth % 2 != 0:
        err(f"odd depth in SFT mode (got {config.depth} layers; SFT trees need depth 2k)")

    for i, layer in enumerate(config.layers, start=1):
        expected = role_for_layer(config.mode, i)
        if layer.role is not expected:
            err(f"layer {i} role is {layer.role.value!r}, expected {expected.value!r} "
                f"for {config.mode.value} mode")
        if layer.branching < 1:
            err(f"layer {i} branching must be >= 1 (got {layer.branching})")
        if layer.max_tokens < 1:
            err(f"layer {i} max_tokens must be >= 1 (got {layer.max_tokens})")
        if layer.temperature < 0:
            err(f"layer {i} temperature must be >= 0 (got {layer.temperature})")

    if config.oversample_factor < 1.0:
        err(f"oversample_factor must be >= 1.0 (got {config.oversample_factor})")
    if not 0.0 <= config.mmr_lambda <= 1.0:
        err(f"mmr_lambda must be in [0, 1] (got {config.mmr_lambda})")
    if not 0.0 < config.dedup_threshold <= 1.01:
        err(f"dedup_threshold must be in (0, 1.01] (got {config.dedup_threshold})")
    if not 0 <= config.seed <= 0xFFFFFFFFFFFFFFFF:
        err(f"seed must fit in an unsigned 64-bit integer (got {config.seed})")

    if config.mode is Mode.SFT and report.ok:
        answer_budgets = [l.max_tokens for l in config.layers if l.role is Role.ANSWER]
        if any(b <= a for a, b in zip(answer_budgets, answer_budgets[1:])):
            warn("answer budgets not increasing with depth")
        question_budgets = {l.max_tokens for l in config.layers if l.role is Role.QUESTION}
        if len(question_budgets) > 1:
            warn("question budgets vary across layers (a single shared budget is intended)")

    if report.ok:
        report.shape = classify_shape(config.branching)
    return report


def expected_leaf_count(config: TreeConfig) -> int:
    """Product of the branching factors: leaf count of a shortfall-free run."""
    report = validate_config(config)
    if not report.ok:
        raise ConfigError("invalid config: " + "; ".join(report.errors))
    count = 1
    for n in config.branching:
        count *= n
    return count


# --- config JSON ----------------------------------------------------------

_CONFIG_KEYS = {
    "mode", "system_prompt", "layers", "oversample_factor",
    "mmr_lambda", "dedup_threshold", "seed", "template_id",
}
_LAYER_KEYS = {"branching", "max_tokens", "role", "temperature", "stop_markers"}


def _layer_from_dict(raw: dict, mode: Mode, layer_index: int) -> LayerSpec:
    unknown = set(raw) - _LAYER_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in layer {layer_index}: {sorted(unknown)}")
    try:
        branching = int(raw["branching"])
        max_tokens = int(raw["max_tokens"])
    except KeyError as exc:
        raise ConfigError(f"layer {layer_index} is missing required key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"layer {layer_index} has a non-integer branching/max_tokens") from exc

    if "role" in raw:
        try:
            role = Role(str(raw["role"]).lower())
        except ValueError as exc:
            raise ConfigError(f"layer {layer_index} has unknown role {raw['role']!r}") from exc
    else:
        role = role_for_layer(mode, layer_index)

    if "temperature" in raw:
        temperature = float(raw["temperature"])
    else:
        temperature = ANSWER_TEMPERATURE if role is Role.ANSWER else QUESTION_TEMPERATURE

    stop_markers = tuple(str(s) for s in raw.get("stop_markers", ()))
    return LayerSpec(branching=branching, max_tokens=max_tokens, role=role,
                     temperature=temperature, stop_markers=stop_markers)


def config_from_dict(raw: dict) -> TreeConfig:
    """Build a TreeConfig from parsed JSON; unknown keys are a hard error."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("mode", "system_prompt", "layers"):
        if key not in raw:
            raise ConfigError(f"config is missing required key {key!r}")
    try:
        mode = Mode(str(raw["mode"]).lower())
    except ValueError as exc:
        raise ConfigError(f"unknown mode {raw['mode']!r} (expected 'sft' or 'pt')") from exc
    if not isinstance(raw["layers"], list):
        raise ConfigError("'layers' must be a list")
    layers = tuple(
        _layer_from_dict(layer_raw, mode, i)
        for i, layer_raw in enumerate(raw["layers"], start=1)
    )
    return TreeConfig(
        mode=mode,
        system_prompt=str(raw["system_prompt"]),
        layers=layers,
        oversample_factor=float(raw.get("oversample_factor", 2.0)),
        mmr_lambda=float(raw.get("mmr_lambda", 0.5)),
        dedup_threshold=float(raw.get("dedup_threshold", 0.95)),
        seed=int(raw.get("seed", 0)),
        template_id=str(raw.get("template_id", "plain")),
    )


def load_config(path: str | Path) -> TreeConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(config: TreeConfig) -> dict:
    """Canonical dict form: every field materialized, enum values lowered."""
    return {
        "mode": config.mode.value,
        "system_prompt": config.system_prompt,
        "layers": [
            {
                "branching": l.branching,
                "max_tokens": l.max_tokens,
                "role": l.role.value,
                "temperature": l.temperature,
                "stop_markers": list(l.stop_markers),
            }
            for l in config.layers
        ],
        "oversample_factor": config.oversample_factor,
        "mmr_lambda": config.mmr_lambda,
        "dedup_threshold": config.dedup_threshold,
        "seed": config.seed,
        "template_id": config.template_id,
    }


def canonical_config_json(config: TreeConfig) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True)


def config_hash(config: TreeConfig) -> str:
    """64-bit FNV-1a of the canonical serialization, as 16 hex digits."""
    return f"{hash_text(canonical_config_json(config)):016x}"


# --- nodes and the tree container -----------------------------------------

@dataclass(frozen=True)
class GenMeta:
    backend_id: str
    finish_reason: str
    sample_index: int


@dataclass(frozen=True)
class TreeNode:
    """One generated question/answer/continuation.

    Identity fields are immutable; ``children`` is the only list the owning
    tree appends to (single writer).
    """

    id: str
    parent_id: str | None
    layer: int
    role: Role
    text: str
    token_count: int
    embedding: tuple[float, ...] | None = None
    children: list[str] = field(default_factory=list)
    gen_meta: GenMeta | None = None


def child_id(parent_id: str, rank: int) -> str:
    return str(rank) if parent_id == ROOT_ID else f"{parent_id}.{rank}"


def structural_key(node_id: str) -> tuple[int, ...]:
    if node_id == ROOT_ID:
        return ()
    return tuple(int(part) for part in node_id.split("."))


def node_to_record(node: TreeNode, include_embedding: bool = False) -> dict:
    record = {
        "id": node.id,
        "parent_id": node.parent_id,
        "layer": node.layer,
        "role": node.role.value,
        "text": node.text,
        "token_count": node.token_count,
        "gen_meta": None if node.gen_meta is None else {
            "backend_id": node.gen_meta.backend_id,
            "finish_reason": node.gen_meta.finish_reason,
            "sample_index": node.gen_meta.sample_index,
        },
    }
    if include_embedding and node.embedding is not None:
        record["embedding"] = list(node.embedding)
    return record


def node_from_record(record: dict) -> TreeNode:
    meta = record.get("gen_meta")
    embedding = record.get("embedding")
    return TreeNode(
        id=record["id"],
        parent_id=record["parent_id"],
        layer=record["layer"],
        role=Role(record["role"]),
        text=record["text"],
        token_count=record["token_count"],
        embedding=None if embedding is None else tuple(float(v) for v in embedding),
        gen_meta=None if meta is None else GenMeta(
            backend_id=meta["backend_id"],
            finish_reason=meta["finish_reason"],
            sample_index=meta["sample_index"],
        ),
    )


class Tree:
    """In-memory tree container. Mutated only by its single scheduler/writer."""

    def __init__(self, config: TreeConfig):
        self.config = config
        root = TreeNode(
            id=ROOT_ID, parent_id=None, layer=0, role=Role.ROOT,
            text=config.system_prompt,
            token_count=len(config.system_prompt.split()),
        )
        self.nodes: dict[str, TreeNode] = {ROOT_ID: root}
        self._expanded: set[str] = set()
        self._shortfalls: dict[str, int] = {}

    @property
    def root(self) -> TreeNode:
        return self.nodes[ROOT_ID]

    @property
    def depth(self) -> int:
        return self.config.depth

    def node(self, node_id: str) -> TreeNode:
        return self.nodes[node_id]

    def add_children(self, parent_id: str, children: Sequence[TreeNode],
                     shortfall: int = 0) -> None:
        """Attach one committed child set and mark the parent expanded."""
        parent = self.nodes[parent_id]
        for node in children:
            if node.layer != parent.layer + 1:
                raise ValueError(
                    f"child {node.id} has layer {node.layer}, parent {parent_id} "
                    f"is at layer {parent.layer}")
            self.nodes[node.id] = node
            parent.children.append(node.id)
        self._expanded.add(parent_id)
        if shortfall:
            self._shortfalls[parent_id] = shortfall

    def insert_replayed_node(self, node: TreeNode) -> None:
        """Insert a node from a checkpoint replay, rebuilding the child links."""
        if node.id == ROOT_ID:
            self.nodes[ROOT_ID] = node
            return
        parent = self.nodes[node.parent_id]
        self.nodes[node.id] = node
        parent.children.append(node.id)
        self._expanded.add(node.parent_id)

    def record_shortfall(self, parent_id: str, missing: int) -> None:
        self._expanded.add(parent_id)
        if missing:
            self._shortfalls[parent_id] = missing

    def is_expanded(self, node_id: str) -> bool:
        return node_id in self._expanded or self.nodes[node_id].layer >= self.depth

    @property
    def shortfalls(self) -> dict[str, int]:
        return dict(self._shortfalls)

    @property
    def shortfall_total(self) -> int:
        return sum(self._shortfalls.values())

    def layer_ids(self, layer: int) -> list[str]:
        ids = [nid for nid, node in self.nodes.items() if node.layer == layer]
        ids.sort(key=structural_key)
        return ids

    def pending_parents(self, layer_index: int) -> list[str]:
        """Layer-(i-1) nodes whose layer-i expansion has not been committed."""
        return [nid for nid in self.layer_ids(layer_index - 1)
                if nid not in self._expanded]

    def complete(self) -> bool:
        return all(self.is_expanded(nid)
                   for nid, node in self.nodes.items() if node.layer < self.depth)

    def deepest_complete_layer(self) -> int:
        """Largest L such that every node above layer L has been expanded."""
        deepest = 0
        for layer in range(1, self.depth + 1):
            if all(nid in self._expanded for nid in self.layer_ids(layer - 1)):
                deepest = layer
            else:
                break
        return deepest

    def path_nodes(self, node_id: str) -> list[TreeNode]:
        """Root-exclusive ancestor chain ending at ``node_id``."""
        path: list[TreeNode] = []
        node = self.nodes[node_id]
        while node.id != ROOT_ID:
            path.append(node)
            node = self.nodes[node.parent_id]
        path.reverse()
        return path

    def path_texts(self, node_id: str) -> list[str]:
        return [node.text for node in self.path_nodes(node_id)]

    def leaf_paths(self, permissive: bool = False) -> list[list[TreeNode]]:
        """Every root-to-leaf path, root excluded, in structural (DFS) order.

        On an incomplete tree, ``permissive`` yields paths down to the deepest
        fully committed layer (rounded down to an even layer in SFT mode).
        """
        target = self.depth
        if not self.complete():
            if not permissive:
                raise IncompleteTreeError(
                    "tree expansion is not finished; pass permissive=True for "
                    "paths to the deepest completed layer")
            target = self.deepest_complete_layer()
            if self.config.mode is Mode.SFT:
                target -= target % 2
        if target == 0:
            return []
        paths: list[list[TreeNode]] = []
        stack: list[TreeNode] = []

        def walk(node: TreeNode) -> None:
            if node.layer == target:
                paths.append(list(stack))
                return
            for cid in node.children:
                child = self.nodes[cid]
                stack.append(child)
                walk(child)
                stack.pop()

        walk(self.root)
        return paths

    def non_root_count(self) -> int:
        return len(self.nodes) - 1


def leaf_paths(tree: Tree, permissive: bool = False) -> list[list[TreeNode]]:
    return tree.leaf_paths(permissive=permissive)
