"""From-scratch numeric core for the region classifier.

Token embedding -> 4 relational graph-convolution layers -> mean pooling ->
3 dense layers -> softmax cross-entropy, all in float64 numpy with
hand-derived reverse-mode gradients. Each stored edge participates in two
relations: its flow forward at the destination node and its flow reversed
at the source node (3 flows x 2 directions = 6 relation matrices per
layer). Neighbor messages are averaged per (node, relation), which makes
the forward pass invariant to node permutation after pooling.

Batches are evaluated as one block-diagonal graph; gradients are exact and
equal the mean of per-example gradients up to float reassociation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import ExtrasStats, LabeledExample
from .errors import CheckpointError, DataError
from .graph import ProgramGraph, build_vocabulary

N_RELATIONS = 6
CHECKPOINT_MAGIC = b"PNPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    n_classes: int
    vocab_size: int = 18
    embed_dim: int = 32
    hidden_dim: int = 64
    rgcn_layers: int = 4
    dense_layers: int = 3
    relations: int = N_RELATIONS
    extras_dim: int = 0          # 0 (static), 5 (counters), 6 (counters + cap)
    leaky_slope: float = 0.01

    def __post_init__(self):
        if min(self.n_classes, self.vocab_size, self.embed_dim, self.hidden_dim,
               self.rgcn_layers, self.dense_layers) < 1:
            raise DataError("model dimensions must be positive")
        if self.extras_dim not in (0, 5, 6):
            raise DataError(f"extras_dim must be 0, 5 or 6, got {self.extras_dim}")

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Canonical parameter order; initialization, checkpoints and the
        optimizer all follow it."""
        shapes: list[tuple[str, tuple[int, ...]]] = [
            ("embedding", (self.vocab_size, self.embed_dim))]
        d_in = self.embed_dim
        for l in range(self.rgcn_layers):
            shapes.append((f"rgcn{l}.self", (d_in, self.hidden_dim)))
            for r in range(self.relations):
                shapes.append((f"rgcn{l}.rel{r}", (d_in, self.hidden_dim)))
            shapes.append((f"rgcn{l}.bias", (self.hidden_dim,)))
            d_in = self.hidden_dim
        d_in = self.hidden_dim + self.extras_dim
        for k in range(self.dense_layers):
            d_out = self.n_classes if k == self.dense_layers - 1 else self.hidden_dim
            shapes.append((f"dense{k}.weight", (d_in, d_out)))
            shapes.append((f"dense{k}.bias", (d_out,)))
            d_in = d_out
        return shapes


class ModelParams:
    """Named parameter arrays in canonical order, plus the extras z-score
    statistics fitted at training time."""

    def __init__(self, spec: ModelSpec, arrays: dict[str, np.ndarray],
                 extras_stats: ExtrasStats | None = None):
        self.spec = spec
        self.arrays = arrays
        self.extras_stats = extras_stats
        for name, shape in spec.parameter_shapes():
            if name not in arrays or arrays[name].shape != shape:
                raise DataError(f"parameter {name} missing or misshaped")

    def names(self) -> list[str]:
        return [name for name, _ in self.spec.parameter_shapes()]

    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()},
                           self.extras_stats)


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Xavier-uniform matrices, zero biases; bit-identical per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.parameter_shapes():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(spec, arrays)


def zero_grads(spec: ModelSpec) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in spec.parameter_shapes()}


# ---------------------------------------------------------------------------
# Graph tensors and batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GraphTensors:
    """Index arrays of one graph, ready for message passing. rel_edges[r]
    holds (receiver, sender) node arrays of relation r."""
    token_ids: np.ndarray
    rel_edges: tuple[tuple[np.ndarray, np.ndarray], ...]
    n_nodes: int


def graph_tensors(graph: ProgramGraph) -> GraphTensors:
    token_ids = np.array([n.token_id for n in graph.nodes], dtype=np.int64)
    buckets: list[tuple[list[int], list[int]]] = [([], []) for _ in range(N_RELATIONS)]
    for e in graph.edges:
        fwd, rev = buckets[int(e.flow)], buckets[int(e.flow) + 3]
        fwd[0].append(e.dst)
        fwd[1].append(e.src)
        rev[0].append(e.src)
        rev[1].append(e.dst)
    rel = tuple((np.array(rx, dtype=np.int64), np.array(sx, dtype=np.int64))
                for rx, sx in buckets)
    return GraphTensors(token_ids, rel, len(graph.nodes))


@dataclass
class _Batch:
    token_ids: np.ndarray
    rel_edges: list[tuple[np.ndarray, np.ndarray]]
    seg_ids: np.ndarray       # node -> graph index
    sizes: np.ndarray         # nodes per graph
    extras: np.ndarray        # (B, extras_dim)
    labels: np.ndarray | None


def make_batch(tensors: list[GraphTensors], extras: list[np.ndarray] | None,
               labels: list[int] | None, extras_dim: int) -> _Batch:
    offsets = np.cumsum([0] + [t.n_nodes for t in tensors[:-1]])
    token_ids = np.concatenate([t.token_ids for t in tensors])
    rel_edges = []
    for r in range(N_RELATIONS):
        recv = np.concatenate([t.rel_edges[r][0] + off
                               for t, off in zip(tensors, offsets)])
        send = np.concatenate([t.rel_edges[r][1] + off
                               for t, off in zip(tensors, offsets)])
        rel_edges.append((recv, send))
    sizes = np.array([t.n_nodes for t in tensors], dtype=np.int64)
    seg_ids = np.repeat(np.arange(len(tensors)), sizes)
    if extras_dim:
        if extras is None or any(e is None for e in extras):
            raise DataError("model expects extras but none were provided")
        ex = np.vstack([np.asarray(e, dtype=np.float64) for e in extras])
        if ex.shape[1] != extras_dim:
            raise DataError(f"extras length {ex.shape[1]} != spec {extras_dim}")
    else:
        ex = np.zeros((len(tensors), 0))
    lab = np.asarray(labels, dtype=np.int64) if labels is not None else None
    return _Batch(token_ids, rel_edges, seg_ids, sizes, ex, lab)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope)


def _encode(params: ModelParams, batch: _Batch, keep_cache: bool):
    """Embedding + RGCN stack + mean pooling -> (pooled, cache)."""
    spec = params.spec
    A = params.arrays
    if batch.token_ids.size and batch.token_ids.max() >= spec.vocab_size:
        raise DataError("token id out of vocabulary range")
    h = A["embedding"][batch.token_ids]
    n = h.shape[0]

    counts = []
    for recv, _ in batch.rel_edges:
        counts.append(np.bincount(recv, minlength=n).astype(np.float64))

    cache = {"h0": h, "layers": []} if keep_cache else None
    for l in range(spec.rgcn_layers):
        z = h @ A[f"rgcn{l}.self"] + A[f"rgcn{l}.bias"]
        aggs = []
        for r in range(N_RELATIONS):
            recv, send = batch.rel_edges[r]
            agg = np.zeros_like(h)
            if recv.size:
                np.add.at(agg, recv, h[send] / counts[r][recv, None])
            z += agg @ A[f"rgcn{l}.rel{r}"]
            aggs.append(agg)
        if keep_cache:
            cache["layers"].append({"h_in": h, "z": z, "aggs": aggs})
        h = _leaky(z, spec.leaky_slope)

    pooled = np.zeros((len(batch.sizes), h.shape[1]))
    np.add.at(pooled, batch.seg_ids, h)
    pooled /= batch.sizes[:, None]
    if keep_cache:
        cache["counts"] = counts
    return pooled, cache


def _head(params: ModelParams, pooled: np.ndarray, extras: np.ndarray,
          keep_cache: bool):
    """Dense stack on pooled graph vectors -> (logits, cache)."""
    spec = params.spec
    A = params.arrays
    x = np.concatenate([pooled, extras], axis=1)
    cache = {"inputs": []} if keep_cache else None
    for k in range(spec.dense_layers):
        if keep_cache:
            cache["inputs"].append(x)
        a = x @ A[f"dense{k}.weight"] + A[f"dense{k}.bias"]
        x = np.maximum(a, 0.0) if k < spec.dense_layers - 1 else a
        if keep_cache and k < spec.dense_layers - 1:
            cache.setdefault("pre", []).append(a)
    return x, cache


def _head_backward(params: ModelParams, cache: dict, dlogits: np.ndarray,
                   grads: dict[str, np.ndarray]) -> np.ndarray:
    """Returns gradient w.r.t. the dense stack's input (pooled ++ extras)."""
    spec = params.spec
    A = params.arrays
    dx = dlogits
    for k in reversed(range(spec.dense_layers)):
        if k < spec.dense_layers - 1:
            dx = dx * (cache["pre"][k] > 0)
        x_in = cache["inputs"][k]
        grads[f"dense{k}.weight"] += x_in.T @ dx
        grads[f"dense{k}.bias"] += dx.sum(axis=0)
        dx = dx @ A[f"dense{k}.weight"].T
    return dx


def _encode_backward(params: ModelParams, batch: _Batch, cache: dict,
                     dpooled: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    spec = params.spec
    A = params.arrays
    counts = cache["counts"]
    dh = dpooled[batch.seg_ids] / batch.sizes[batch.seg_ids, None]
    for l in reversed(range(spec.rgcn_layers)):
        layer = cache["layers"][l]
        dz = dh * _leaky_grad(layer["z"], spec.leaky_slope)
        grads[f"rgcn{l}.bias"] += dz.sum(axis=0)
        grads[f"rgcn{l}.self"] += layer["h_in"].T @ dz
        dh = dz @ A[f"rgcn{l}.self"].T
        for r in range(N_RELATIONS):
            recv, send = batch.rel_edges[r]
            grads[f"rgcn{l}.rel{r}"] += layer["aggs"][r].T @ dz
            if recv.size:
                dagg = dz @ A[f"rgcn{l}.rel{r}"].T
                np.add.at(dh, send, dagg[recv] / counts[r][recv, None])
    np.add.at(grads["embedding"], batch.token_ids, dh)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batch_forward(params: ModelParams, batch: _Batch) -> np.ndarray:
    pooled, _ = _encode(params, batch, keep_cache=False)
    logits, _ = _head(params, pooled, batch.extras, keep_cache=False)
    return logits


def batch_loss_and_grad(params: ModelParams, batch: _Batch,
                        head_only: bool = False,
                        pooled: np.ndarray | None = None):
    """Mean softmax cross-entropy and its exact gradient. With head_only,
    `pooled` holds precomputed graph vectors and only dense-layer gradients
    are produced (frozen-GNN training)."""
    if batch.labels is None:
        raise DataError("batch has no labels")
    if batch.labels.min() < 0 or batch.labels.max() >= params.spec.n_classes:
        raise DataError("label out of range for model classes")
    if head_only:
        enc_cache = None
        assert pooled is not None
    else:
        pooled, enc_cache = _encode(params, batch, keep_cache=True)
    logits, head_cache = _head(params, pooled, batch.extras, keep_cache=True)

    b = logits.shape[0]
    probs = _softmax(logits)
    nll = -np.log(probs[np.arange(b), batch.labels])
    loss = float(nll.mean())

    dlogits = probs
    dlogits[np.arange(b), batch.labels] -= 1.0
    dlogits /= b

    if head_only:
        grads = {name: np.zeros(shape)
                 for name, shape in params.spec.parameter_shapes()
                 if name.startswith("dense")}
        _head_backward(params, head_cache, dlogits, grads)
        return loss, grads
    grads = zero_grads(params.spec)
    dx = _head_backward(params, head_cache, dlogits, grads)
    dpooled = dx[:, : params.spec.hidden_dim]
    _encode_backward(params, batch, enc_cache, dpooled, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Public single-graph / example-list entry points
# ---------------------------------------------------------------------------

def _example_batch(examples: list[LabeledExample], extras_dim: int) -> _Batch:
    tensors, extras, labels = [], [], []
    for ex in examples:
        if ex.graph is None:
            raise DataError(f"example {ex.region_id} carries no graph")
        tensors.append(graph_tensors(ex.graph))
        extras.append(ex.extras)
        labels.append(ex.label)
    return make_batch(tensors, extras if extras_dim else None, labels, extras_dim)


def forward(params: ModelParams, graph: ProgramGraph,
            extras: np.ndarray | None = None) -> np.ndarray:
    """Logits for one region graph."""
    ed = params.spec.extras_dim
    batch = make_batch([graph_tensors(graph)], [extras] if ed else None, None, ed)
    return batch_forward(params, batch)[0]


def loss_and_grad(params: ModelParams, batch: list[LabeledExample]):
    """Mean cross-entropy over labeled examples and its exact gradient."""
    if not batch:
        raise DataError("empty batch")
    return batch_loss_and_grad(params, _example_batch(batch, params.spec.extras_dim))


def grad_check(params: ModelParams, example: LabeledExample,
               epsilon: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference
    gradients, over every scalar parameter."""
    _, grads = loss_and_grad(params, [example])

    def loss_at(arrays: dict[str, np.ndarray]) -> float:
        probe = ModelParams(params.spec, arrays, params.extras_stats)
        loss, _ = loss_and_grad(probe, [example])
        return loss

    worst = 0.0
    for name in params.names():
        theta = params.arrays[name]
        flat = theta.reshape(-1)
        g_a = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at(params.arrays)
            flat[i] = orig - epsilon
            dn = loss_at(params.arrays)
            flat[i] = orig
            g_n = (up - dn) / (2 * epsilon)
            rel = abs(g_a[i] - g_n) / max(1e-8, abs(g_a[i]) + abs(g_n))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptState:
    variant: str                          # "adam" | "adamw-amsgrad"
    lr: float = 0.001
    weight_decay: float = 0.01            # applied by adamw-amsgrad only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    vmax: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def create(variant: str, spec: ModelSpec, lr: float = 0.001,
               weight_decay: float = 0.01) -> "OptState":
        if variant not in ("adam", "adamw-amsgrad"):
            raise DataError(f"unknown optimizer variant {variant!r}")
        shapes = spec.parameter_shapes()
        opt = OptState(variant=variant, lr=lr, weight_decay=weight_decay)
        opt.m = {n: np.zeros(s) for n, s in shapes}
        opt.v = {n: np.zeros(s) for n, s in shapes}
        if variant == "adamw-amsgrad":
            opt.vmax = {n: np.zeros(s) for n, s in shapes}
        return opt


def _decayed(name: str) -> bool:
    # Decoupled weight decay touches weight matrices only.
    return not name.endswith(".bias") and name != "embedding"


def optimizer_step(params: ModelParams, grads: dict[str, np.ndarray],
                   opt: OptState, mask: dict[str, bool] | None = None) -> ModelParams:
    """One Adam / AdamW(amsgrad) update in place. Parameters masked as
    frozen are left bit-identical (their moments are not advanced either)."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name in params.names():
        if mask is not None and not mask.get(name, True):
            continue
        if name not in grads:
            continue
        g = grads[name]
        theta = params.arrays[name]
        if g.shape != theta.shape:
            raise DataError(f"gradient shape mismatch for {name}")
        if opt.variant == "adamw-amsgrad" and opt.weight_decay and _decayed(name):
            theta *= 1.0 - opt.lr * opt.weight_decay
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.variant == "adamw-amsgrad":
            np.maximum(opt.vmax[name], v, out=opt.vmax[name])
            denom = np.sqrt(opt.vmax[name] / bc2) + opt.eps
        else:
            denom = np.sqrt(v / bc2) + opt.eps
        theta -= opt.lr * (m / bc1) / denom
    return params


def freeze_gnn(params: ModelParams) -> dict[str, bool]:
    """Trainability mask for transfer retraining: embedding and every RGCN
    parameter frozen, dense layers trainable."""
    return {name: name.startswith("dense") for name in params.names()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, opt: OptState | None = None,
                    meta: dict | None = None) -> bytes:
    """Little-endian binary blob: magic, version, JSON header, raw float64
    parameter (and optimizer moment) buffers in canonical order."""
    header = {
        "spec": asdict(params.spec),
        "vocab_hash": build_vocabulary().hash(),
        "extras_stats": (
            {"mean": list(params.extras_stats.mean), "std": list(params.extras_stats.std)}
            if params.extras_stats is not None else None),
        "params": [{"name": n, "shape": list(s)} for n, s in params.spec.parameter_shapes()],
        "opt": ({"variant": opt.variant, "lr": opt.lr, "weight_decay": opt.weight_decay,
                 "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
                if opt is not None else None),
        "meta": meta or {},
    }
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += CHECKPOINT_VERSION.to_bytes(4, "little")
    out += len(head).to_bytes(4, "little")
    out += head
    for name in params.names():
        out += np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes()
    if opt is not None:
        blobs = [opt.m, opt.v] + ([opt.vmax] if opt.variant == "adamw-amsgrad" else [])
        for table in blobs:
            for name in params.names():
                out += np.ascontiguousarray(table[name], dtype="<f8").tobytes()
    return bytes(out)


def load_checkpoint(data: bytes):
    """-> (params, opt | None, meta). Verifies magic, version and that the
    stored vocabulary hash matches this build's vocabulary."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = int.from_bytes(data[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    head_len = int.from_bytes(data[8:12], "little")
    try:
        header = json.loads(data[12:12 + head_len].decode("utf-8"))
        spec = ModelSpec(**header["spec"])
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    if header["vocab_hash"] != build_vocabulary().hash():
        raise CheckpointError("checkpoint vocabulary hash does not match this build")

    pos = 12 + head_len

    def read_table() -> dict[str, np.ndarray]:
        nonlocal pos
        table = {}
        for name, shape in spec.parameter_shapes():
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            if pos + nbytes > len(data):
                raise CheckpointError("truncated checkpoint payload")
            table[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8") \
                .astype(np.float64).reshape(shape)
            pos += nbytes
        return table

    arrays = read_table()
    stats = None
    if header["extras_stats"] is not None:
        stats = ExtrasStats(tuple(header["extras_stats"]["mean"]),
                            tuple(header["extras_stats"]["std"]))
    params = ModelParams(spec, arrays, stats)

    opt = None
    if header["opt"] is not None:
        o = header["opt"]
        opt = OptState(variant=o["variant"], lr=o["lr"], weight_decay=o["weight_decay"],
                       beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        opt.m = read_table()
        opt.v = read_table()
        if opt.variant == "adamw-amsgrad":
            opt.vmax = read_table()
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return params, opt, header.get("meta", {})


def checkpoint_sidecar(data: bytes) -> str:
    """Human-readable JSON mirror of a checkpoint's metadata."""
    head_len = int.from_bytes(data[8:12], "little")
    header = json.loads(data[12:12 + head_len].decode("utf-8"))
    header["format_version"] = int.from_bytes(data[4:8], "little")
    header["payload_bytes"] = len(data)
    return json.dumps(header, indent=2, sort_keys=True)
