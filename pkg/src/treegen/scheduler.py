"""Layer-by-layer tree expansion with bounded parallelism and checkpoint/resume.

Concurrency model: many backend calls may be in flight (bounded by the worker
pool), but there is exactly one writer — the driving thread — which applies
results to the tree and the on-disk log in canonical structural order
regardless of completion order. That makes nodes.jsonl a byte-deterministic
function of the config under the mock backend, independent of worker count,
timing, and interruption pattern.

Balance-shaped trees use layers as barriers: no layer-(i+1) request is issued
before every layer-i node is committed. Wide/chain-shaped trees (branching 1
below layer 1) expand each layer-1 subtree independently, with no cross-chain
barriers; chain blocks are still committed in chain order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .backends import (EmbeddingBackend, EmbeddingVector, GenerationBackend,
                       GenerationRequest)
from .dedup import mmr_select, near_duplicate_filter
from .errors import (BackendError, CheckpointError, ConfigError,
                     EmptyCompletionError, ResumableRunError)
from .fnv import combine
from .templates import (ChatTemplate, get_template, render_answer_prompt,
                        render_continuation_prompt, render_question_prompt,
                        strip_completion)
from .tree import (ROOT_ID, GenMeta, Role, Tree, TreeConfig, TreeNode,
                   TreeShape, child_id, config_hash, config_to_dict,
                   node_from_record, node_to_record, validate_config)

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
NODES_FILE = "nodes.jsonl"
MANIFEST_FILE = "manifest.json"

# manifest counters are flushed this often; everything in them is recomputable
# from nodes.jsonl except zero-child shortfall marks, which are also flushed
# eagerly whenever they occur.
_MANIFEST_FLUSH_EVERY = 64


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class CheckpointStore:
    """Append-only persisted tree: config.json + nodes.jsonl + manifest.json.

    Every node record's parent appears earlier in nodes.jsonl, so replaying
    the file reconstructs the tree exactly. One parent's full child set is
    appended as a single block; a torn trailing block is dropped on load and
    regenerated deterministically.
    """

    def __init__(self, directory: str | Path, include_embeddings: bool = False):
        self.directory = Path(directory)
        self.config_path = self.directory / CONFIG_FILE
        self.nodes_path = self.directory / NODES_FILE
        self.manifest_path = self.directory / MANIFEST_FILE
        self.include_embeddings = include_embeddings
        self.manifest: dict = {}
        self._handle = None
        self._since_flush = 0

    # -- lifecycle ----------------------------------------------------------

    def exists(self) -> bool:
        return self.config_path.exists()

    def initialize(self, config: TreeConfig, backend_id: str, workers: int) -> Tree:
        self.directory.mkdir(parents=True, exist_ok=True)
        if self.exists():
            raise CheckpointError(f"checkpoint already present in {self.directory}")
        payload = {"config": config_to_dict(config), "hash": config_hash(config)}
        self.config_path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                                    encoding="utf-8")
        self.manifest = {
            "status": "running",
            "config_hash": config_hash(config),
            "backend_id": backend_id,
            "workers": workers,
            "nodes_committed": 0,
            "shortfalls": 0,
            "shortfall_parents": {},
            "dedup_drops": 0,
            "retries": 0,
            "started_at": _utcnow(),
            "ended_at": None,
        }
        tree = Tree(config)
        self._open_handle()
        self._write_lines([self._encode(tree.root)])
        self._write_manifest()
        return tree

    def _open_handle(self):
        if self._handle is None:
            self._handle = open(self.nodes_path, "a", encoding="utf-8", newline="\n")

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    # -- encoding -----------------------------------------------------------

    def _encode(self, node: TreeNode) -> str:
        record = node_to_record(node, include_embedding=self.include_embeddings)
        return json.dumps(record, ensure_ascii=False, separators=(",", ":"))

    def _write_lines(self, lines: Sequence[str]) -> None:
        self._handle.write("".join(line + "\n" for line in lines))
        self._handle.flush()

    # -- commits ------------------------------------------------------------

    def append_block(self, nodes: Sequence[TreeNode], shortfall_parent: str | None = None,
                     shortfall: int = 0, dedup_drops: int = 0, retried: bool = False) -> None:
        """Commit one expansion result atomically (all-or-nothing lines)."""
        self._open_handle()
        if nodes:
            self._write_lines([self._encode(n) for n in nodes])
        self.manifest["nodes_committed"] += len(nodes)
        self.manifest["dedup_drops"] += dedup_drops
        if retried:
            self.manifest["retries"] += 1
        if shortfall:
            self.manifest["shortfalls"] += shortfall
            self.manifest["shortfall_parents"][shortfall_parent] = shortfall
            self._write_manifest()  # zero-child parents must survive a crash
            return
        self._since_flush += 1
        if self._since_flush >= _MANIFEST_FLUSH_EVERY:
            self._write_manifest()

    def _write_manifest(self) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, ensure_ascii=False) + "\n",
                       encoding="utf-8")
        os.replace(tmp, self.manifest_path)
        self._since_flush = 0

    def finalize(self, status: str, exit_status: int | None = None) -> None:
        self.manifest["status"] = status
        self.manifest["ended_at"] = _utcnow()
        if exit_status is not None:
            self.manifest["exit_status"] = exit_status
        self._write_manifest()
        self.close()

    # -- load / replay ------------------------------------------------------

    def load(self, config: TreeConfig) -> Tree:
        """Verify compatibility, recover a torn tail, and replay the log."""
        if not self.exists():
            raise CheckpointError(f"no checkpoint in {self.directory}")
        stored = json.loads(self.config_path.read_text(encoding="utf-8"))
        if stored.get("hash") != config_hash(config):
            raise CheckpointError(
                f"checkpoint config hash {stored.get('hash')} does not match the "
                f"provided config hash {config_hash(config)}")

        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        else:
            self.manifest = {
                "status": "running", "config_hash": config_hash(config),
                "backend_id": None, "workers": None, "nodes_committed": 0,
                "shortfalls": 0, "shortfall_parents": {}, "dedup_drops": 0,
                "retries": 0, "started_at": _utcnow(), "ended_at": None,
            }

        records = self._read_recovered_records()
        tree = Tree(config)
        if not records:
            # the tear reached the root record; rewrite it and start over
            log.warning("recovered checkpoint had no intact records; reinitializing")
            self._open_handle()
            self._write_lines([self._encode(tree.root)])
            return tree
        if records[0].get("id") != ROOT_ID:
            raise CheckpointError("nodes.jsonl does not start with the root record")
        for record in records[1:]:
            tree.insert_replayed_node(node_from_record(record))
        for parent_id, missing in self.manifest.get("shortfall_parents", {}).items():
            tree.record_shortfall(parent_id, int(missing))
        self.manifest["nodes_committed"] = tree.non_root_count()
        self._open_handle()
        return tree

    def _read_recovered_records(self) -> list[dict]:
        """Parse nodes.jsonl, truncating a torn trailing block in place.

        The record boundary is a full line. If the tail is torn (partial or
        unparseable final line), the whole trailing same-parent group is
        dropped too: a block is written as one append, so only the final block
        can be incomplete, and over-dropping is safe because expansion is
        deterministic and will be redone on resume.
        """
        raw = self.nodes_path.read_bytes() if self.nodes_path.exists() else b""
        if not raw:
            return []
        lines = raw.split(b"\n")
        torn = lines[-1] != b""  # file must end with a newline
        if not torn:
            lines = lines[:-1]
        else:
            lines = lines[:-1]  # drop the partial fragment
        records: list[dict] = []
        for line in lines:
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                torn = True  # everything from the bad line on is suspect
                break
        if torn and records:
            last_parent = records[-1].get("parent_id")
            while records and records[-1].get("parent_id") == last_parent:
                records.pop()
            log.warning("nodes.jsonl had a torn trailing block; dropped it "
                        "(will be regenerated on resume)")
        if torn:
            valid_bytes = sum(len(json.dumps(r, ensure_ascii=False, separators=(",", ":"))
                                  .encode("utf-8")) + 1 for r in records)
            # rewrite rather than arithmetic-truncate: the surviving prefix is
            # re-encoded canonically, which matches what was originally written
            with open(self.nodes_path, "w", encoding="utf-8", newline="\n") as fh:
                for r in records:
                    fh.write(json.dumps(r, ensure_ascii=False, separators=(",", ":")) + "\n")
        return records


# --- one expansion step ------------------------------------------------------


@dataclass
class ExpansionPlan:
    """Canonically ordered frontier of (parent_id, layer_index) tasks."""

    pending: list[tuple[str, int]]
    completed: set[str]
    workers: int
    retry_budget: int = 1


def build_plan(tree: Tree, workers: int) -> ExpansionPlan:
    """Everything still to expand, in layer-then-structural order."""
    pending: list[tuple[str, int]] = []
    for layer_index in range(1, tree.depth + 1):
        pending.extend((pid, layer_index) for pid in tree.pending_parents(layer_index))
    completed = {nid for nid, node in tree.nodes.items()
                 if node.layer < tree.depth and tree.is_expanded(nid)}
    return ExpansionPlan(pending=pending, completed=completed, workers=workers)


@dataclass
class ExpansionResult:
    parent_id: str
    layer_index: int
    children: list[TreeNode]
    shortfall: int
    dedup_drops: int
    retried: bool = False


def prompt_for_layer(role: Role, path_texts: Sequence[str], config: TreeConfig,
                     template: ChatTemplate) -> str:
    if role is Role.CONTINUATION:
        return render_continuation_prompt(path_texts, config.system_prompt,
                                          template.turn_separator, mode=config.mode.value)
    if role is Role.QUESTION:
        return render_question_prompt(path_texts, template, config.system_prompt)
    if role is Role.ANSWER:
        return render_answer_prompt(path_texts, template, config.system_prompt)
    raise ConfigError(f"cannot build a prompt for role {role}")


def expand_parent(parent: TreeNode, path_texts: Sequence[str], layer_index: int,
                  config: TreeConfig, template: ChatTemplate,
                  generator: GenerationBackend, embedder: EmbeddingBackend) -> ExpansionResult:
    """Generate, strip, embed, and MMR-filter one parent's child set.

    Requests ceil(oversample_factor * branching) candidates keyed by
    FNV-1a(config seed, parent id, layer index); on a dedup shortfall, one
    regeneration retry widens the pool before the shortfall is accepted.
    """
    layer = config.layer(layer_index)
    want = math.ceil(config.oversample_factor * layer.branching)
    prompt = prompt_for_layer(layer.role, path_texts, config, template)
    base_seed = combine(config.seed, parent.id, layer_index)

    pool_texts: list[str] = []
    pool_meta: list[tuple[int, str]] = []  # (global sample index, finish_reason)
    pool_vectors: list[EmbeddingVector] = []
    query_vec: EmbeddingVector | None = (
        EmbeddingVector(values=parent.embedding) if parent.embedding else None)

    selection = None
    retried = False
    for attempt in range(2):
        offset = attempt * want
        for chunk_index, chunk_start in enumerate(range(0, want, generator.sample_cap)):
            n = min(generator.sample_cap, want - chunk_start)
            # the first chunk of the first attempt uses the base seed directly;
            # further chunks/attempts derive fresh seeds for fresh sample ranges
            if attempt == 0 and chunk_index == 0:
                seed = base_seed
            else:
                seed = combine(base_seed, attempt, chunk_index)
            request = GenerationRequest(
                prompt=prompt, max_tokens=layer.max_tokens,
                temperature=layer.temperature, n_samples=n,
                stop=tuple(layer.stop_markers), request_seed=seed)
            result = generator.generate(request)
            for i, completion in enumerate(result.completions):
                global_index = offset + chunk_start + i
                try:
                    text = strip_completion(completion.text, layer.stop_markers, template)
                except EmptyCompletionError:
                    continue
                pool_texts.append(text)
                pool_meta.append((global_index, completion.finish_reason))

        new_texts = pool_texts[len(pool_vectors):]
        if new_texts:
            if query_vec is None:
                vectors = embedder.embed([parent.text] + new_texts)
                query_vec = vectors[0]
                pool_vectors.extend(vectors[1:])
            else:
                pool_vectors.extend(embedder.embed(new_texts))

        if pool_vectors:
            k = min(layer.branching, len(pool_vectors))
            selection = mmr_select(pool_vectors, query_vec, k, config.mmr_lambda)
            selection = near_duplicate_filter(pool_vectors, selection,
                                              config.dedup_threshold)
            if len(selection.selected) >= layer.branching:
                break
        if attempt == 0:
            retried = True

    kept = list(selection.selected) if selection else []
    drops = len(selection.dropped_as_duplicates) if selection else 0
    children = []
    for rank, pool_index in enumerate(kept):
        sample_index, finish_reason = pool_meta[pool_index]
        text = pool_texts[pool_index]
        children.append(TreeNode(
            id=child_id(parent.id, rank),
            parent_id=parent.id,
            layer=layer_index,
            role=layer.role,
            text=text,
            token_count=len(text.split()),
            embedding=pool_vectors[pool_index].values,
            gen_meta=GenMeta(backend_id=generator.backend_id,
                             finish_reason=finish_reason,
                             sample_index=sample_index),
        ))
    shortfall = layer.branching - len(children)
    if shortfall:
        log.info("expansion shortfall at parent %s layer %d: kept %d of %d",
                 parent.id, layer_index, len(children), layer.branching)
    return ExpansionResult(parent_id=parent.id, layer_index=layer_index,
                           children=children, shortfall=shortfall,
                           dedup_drops=drops, retried=retried)


# --- the runner --------------------------------------------------------------


class TreeRunner:
    """Drives a full tree run against a generation backend and an embedder."""

    def __init__(self, config: TreeConfig, generator: GenerationBackend,
                 embedder: EmbeddingBackend, store: CheckpointStore,
                 template: ChatTemplate | None = None, workers: int = 8):
        report = validate_config(config)
        if not report.ok:
            raise ConfigError("invalid config: " + "; ".join(report.errors))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        self.config = config
        self.generator = generator
        self.embedder = embedder
        self.store = store
        self.template = template or get_template(config.template_id)
        self.workers = workers
        self.shape = report.shape

    # -- public entry points -------------------------------------------------

    def run(self) -> Tree:
        """Expand to full depth, resuming from the store when it has content."""
        if self.store.exists():
            tree = self.store.load(self.config)
            self.store.manifest["status"] = "running"
        else:
            tree = self.store.initialize(self.config, self.generator.backend_id,
                                         self.workers)
        try:
            if self.shape is TreeShape.BALANCE:
                self._run_balance(tree)
            else:
                self._run_chains(tree)
        except (Exception, KeyboardInterrupt):
            # whatever happened, the store holds a valid committed prefix
            self.store.finalize("aborted", exit_status=2)
            raise
        self.store.finalize("complete", exit_status=0)
        return tree

    def resume(self) -> Tree:
        if not self.store.exists():
            raise CheckpointError(f"no checkpoint to resume in {self.store.directory}")
        return self.run()

    # -- balance: layers are barriers -----------------------------------------

    def _run_balance(self, tree: Tree) -> None:
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            for layer_index in range(1, self.config.depth + 1):
                # the frontier is recomputed per layer: deeper parents only
                # exist once the previous barrier has fully committed
                parents = tree.pending_parents(layer_index)
                if not parents:
                    continue
                futures = [
                    pool.submit(self._expand_in_tree, tree, pid, layer_index)
                    for pid in parents
                ]
                # commit strictly in structural order; later futures keep running
                for future in futures:
                    self._commit_result(tree, self._await(future))

    def _expand_in_tree(self, tree: Tree, parent_id: str, layer_index: int) -> ExpansionResult:
        parent = tree.node(parent_id)
        path_texts = tree.path_texts(parent_id)
        return expand_parent(parent, path_texts, layer_index, self.config,
                             self.template, self.generator, self.embedder)

    # -- wide/chain: independent layer-1 subtrees ------------------------------

    def _run_chains(self, tree: Tree) -> None:
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            if not tree.is_expanded(ROOT_ID):
                result = self._await(pool.submit(self._expand_in_tree, tree, ROOT_ID, 1))
                self._commit_result(tree, result)
            if self.config.depth == 1:
                return
            chains = tree.layer_ids(1)
            futures: list[tuple[str, Future | None]] = []
            for chain_id in chains:
                prefix = self._chain_prefix(tree, chain_id)
                deepest = prefix[-1]
                if deepest.layer >= self.config.depth or tree.is_expanded(deepest.id):
                    futures.append((chain_id, None))  # already finished or dead
                    continue
                futures.append((chain_id, pool.submit(self._expand_chain, tree, prefix)))
            # chain blocks commit in chain (structural) order
            for chain_id, future in futures:
                if future is None:
                    continue
                for result in self._await(future):
                    self._commit_result(tree, result)

    def _chain_prefix(self, tree: Tree, chain_id: str) -> list[TreeNode]:
        """Committed single-child descent starting at a layer-1 node."""
        prefix = [tree.node(chain_id)]
        while prefix[-1].children:
            prefix.append(tree.node(prefix[-1].children[0]))
        return prefix

    def _expand_chain(self, tree: Tree, prefix: list[TreeNode]) -> list[ExpansionResult]:
        """Extend one chain to full depth without touching shared state.

        ``prefix`` is the committed descent from the layer-1 node; those nodes
        are immutable, so reading them off-thread is safe. New nodes are built
        locally and handed back for the single writer to commit.
        """
        results: list[ExpansionResult] = []
        path_texts = [n.text for n in prefix]
        node = prefix[-1]
        for layer_index in range(node.layer + 1, self.config.depth + 1):
            result = expand_parent(node, path_texts, layer_index, self.config,
                                   self.template, self.generator, self.embedder)
            results.append(result)
            if not result.children:
                break
            node = result.children[0]
            path_texts.append(node.text)
        return results

    # -- shared plumbing -------------------------------------------------------

    def _await(self, future: Future):
        try:
            return future.result()
        except BackendError as exc:
            raise ResumableRunError(
                f"backend failure after {exc.attempts} attempt(s): {exc}") from exc

    def _commit_result(self, tree: Tree, result: ExpansionResult) -> None:
        tree.add_children(result.parent_id, result.children, shortfall=result.shortfall)
        self.store.append_block(result.children,
                                shortfall_parent=result.parent_id if result.shortfall else None,
                                shortfall=result.shortfall,
                                dedup_drops=result.dedup_drops,
                                retried=result.retried)


def run(config: TreeConfig, generator: GenerationBackend, embedder: EmbeddingBackend,
        store: CheckpointStore, template: ChatTemplate | None = None,
        workers: int = 8) -> Tree:
    """Expand a tree to completion (fresh run, or continue a compatible checkpoint)."""
    return TreeRunner(config, generator, embedder, store,
                      template=template, workers=workers).run()


def resume(config: TreeConfig, generator: GenerationBackend, embedder: EmbeddingBackend,
           store: CheckpointStore, template: ChatTemplate | None = None,
           workers: int = 8) -> Tree:
    """Resume a run from an existing checkpoint; idempotent when complete."""
    return TreeRunner(config, generator, embedder, store,
                      template=template, workers=workers).resume()
