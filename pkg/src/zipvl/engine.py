"""Tiny deterministic multi-layer causal transformer with pluggable sparsity.

The model is pre-norm with RMS norms, a 2-layer SiLU MLP, no biases, no
positional embedding (position enters only through the causal mask), and an
output head tied to the token embedding. Weights are drawn from a seeded
generator in a fixed order, so a config reproduces the model bit-exactly.

Four attention pipelines share one code path:
  dense        full attention, nothing evicted
  zipvl-exact  adaptive budget from full attention scores
  zipvl-probe  adaptive budget from probe-row approximate scores
  fixed        constant retention ratio across layers

Per layer the prefill pass scores token importance, picks an important set,
computes attention only among that set (everything else receives a zero
attention output and rides the residual stream), and caches K/V for the
important tokens only. Decode appends unconditionally and attends to the
whole cache.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention, budget, kvcache, metrics, numkit
from .errors import (
    BoundsError,
    ConfigError,
    EmptySequenceError,
    FormatError,
    VocabError,
)

MODES = ("dense", "zipvl-exact", "zipvl-probe", "fixed")
METRIC_NAMES = ("accumulated", "normalized")
HEAD_AGGS = ("mean", "sum")

# seed stream tags; layer indices occupy the low range
_SAMPLE_TAG = 0x5A17_0001


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    d_model: int
    vocab_size: int
    max_seq: int
    seed: int
    norm_eps: float = 1e-5

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def validate(self) -> "ModelConfig":
        if min(self.layers, self.heads, self.d_model, self.vocab_size, self.max_seq) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        return self


@dataclass(frozen=True)
class SparsityPolicy:
    """Which attention pipeline to run and its knobs."""

    mode: str = "dense"
    tau: float = 0.975
    fixed_ratio: float = 0.5
    probe_recent: int = 64
    probe_random: int = 64
    budget_metric: str = "accumulated"
    identify_metric: str = "normalized"
    keep_last: int = 0
    quantize: bool = False
    group_size: int = 64
    head_agg: str = "mean"
    dense_first_layers: int = 0

    def validate(self) -> "SparsityPolicy":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode in ("zipvl-exact", "zipvl-probe") and not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau={self.tau} outside (0, 1]")
        if self.mode == "fixed" and not 0.0 < self.fixed_ratio <= 1.0:
            raise ConfigError(f"fixed_ratio={self.fixed_ratio} outside (0, 1]")
        if self.mode == "zipvl-probe" and self.probe_recent < 1:
            raise ConfigError("probe_recent must be >= 1")
        if self.probe_random < 0 or self.keep_last < 0 or self.dense_first_layers < 0:
            raise ConfigError("counts must be nonnegative")
        if self.budget_metric not in METRIC_NAMES or self.identify_metric not in METRIC_NAMES:
            raise ConfigError(f"metrics must be one of {METRIC_NAMES}")
        if self.head_agg not in HEAD_AGGS:
            raise ConfigError(f"head_agg must be one of {HEAD_AGGS}")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        return self


@dataclass(frozen=True)
class LayerReport:
    """Per-layer outcome of one prefill pass."""

    layer: int
    n: int
    p: int
    ratio: float
    retained_mass: float
    attn_flops: int
    kv_rows: int
    probe_rows: int = 0
    kv_bytes: int = 0


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    gain_attn: np.ndarray
    gain_mlp: np.ndarray


@dataclass
class TinyTransformer:
    config: ModelConfig
    embedding: np.ndarray
    layers: list = field(default_factory=list)


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32)


def init_model(config: ModelConfig) -> TinyTransformer:
    """Build a model with weights drawn uniformly in +-1/sqrt(fan_in).

    Draw order (also the checkpoint blob order): embedding, then per layer
    wq, wk, wv, wo, w_up, w_down. Norm gains start at one.
    """
    config.validate()
    rng = numkit.make_rng(config.seed)
    d, ff = config.d_model, config.d_ff
    model = TinyTransformer(config=config, embedding=_uniform(rng, d, config.vocab_size).T.copy())
    for _ in range(config.layers):
        model.layers.append(
            LayerWeights(
                wq=_uniform(rng, d, d),
                wk=_uniform(rng, d, d),
                wv=_uniform(rng, d, d),
                wo=_uniform(rng, d, d),
                w_up=_uniform(rng, d, ff),
                w_down=_uniform(rng, ff, d),
                gain_attn=np.ones(d, dtype=np.float32),
                gain_mlp=np.ones(d, dtype=np.float32),
            )
        )
    return model


def _rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.float32(eps))
    return (x * scale * gain).astype(np.float32)


def _silu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _split_heads(x: np.ndarray, heads: int, d_head: int) -> np.ndarray:
    return x.reshape(x.shape[0], heads, d_head).transpose(1, 0, 2)


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise EmptySequenceError("prompt is empty")
    if tokens.size > config.max_seq:
        raise BoundsError(f"prompt length {tokens.size} exceeds max_seq {config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise VocabError(f"token id outside vocabulary of size {config.vocab_size}")
    return tokens


def _layer_partition(
    policy: SparsityPolicy,
    mode: str,
    stats_acc: np.ndarray,
    stats_norm: np.ndarray,
    n: int,
) -> tuple[budget.LayerBudget, budget.TokenPartition]:
    """Derive the layer budget and important-token partition from stats."""
    metric = {"accumulated": stats_acc, "normalized": stats_norm}
    if mode == "dense":
        lb = budget.LayerBudget(
            tau=budget.TAU_NOT_ADAPTIVE, n=n, p=n, retained_mass_fraction=1.0
        )
    else:
        vec = metric[policy.budget_metric]
        mass = float(np.sum(vec, dtype=np.float64))
        if mode == "fixed":
            lb = budget.fixed_budget(n, policy.fixed_ratio)
            lb = replace(
                lb, retained_mass_fraction=budget.top_mass_fraction(vec, lb.p, mass)
            )
        else:
            lb = budget.adaptive_budget(vec, policy.tau, mass)
    ident = metric[policy.identify_metric].astype(np.float64)
    p_eff = lb.p
    n_prot = min(policy.keep_last, n)
    if n_prot:
        ident = ident.copy()
        ident[n - n_prot :] = np.inf
        p_eff = max(p_eff, n_prot)
    return lb, budget.partition_tokens(ident, p_eff)


def prefill(
    model: TinyTransformer,
    tokens: np.ndarray,
    policy: SparsityPolicy,
    trace: list | None = None,
) -> tuple[np.ndarray, kvcache.KVCache, list[LayerReport]]:
    """Run the full-prompt pass, returning logits, the KV cache and reports.

    Every pipeline computes attention through the same restricted path over
    its important set; with the set equal to all tokens that path is the
    dense computation. Tokens outside the set get a zero attention output,
    which the no-bias output projection keeps exactly zero, so their
    residual stream passes through the attention sublayer unchanged.
    """
    config = model.config
    policy.validate()
    tokens = _check_tokens(tokens, config)
    n = tokens.size
    d_head = config.d_head
    scale = 1.0 / np.sqrt(d_head)
    h = model.embedding[tokens]
    cache = kvcache.KVCache(config.layers, config.heads, d_head)
    reports: list[LayerReport] = []
    partitions: list[budget.TokenPartition] = []
    for layer, lw in enumerate(model.layers):
        mode = "dense" if layer < policy.dense_first_layers else policy.mode
        h_before = h
        x = _rms_norm(h, lw.gain_attn, config.norm_eps)
        q = _split_heads(x @ lw.wq, config.heads, d_head)
        k = _split_heads(x @ lw.wk, config.heads, d_head)
        v = _split_heads(x @ lw.wv, config.heads, d_head)

        if mode == "zipvl-probe":
            probe = attention.select_probe_set(
                n, policy.probe_recent, policy.probe_random, numkit.derive_seed(config.seed, layer)
            )
            per_head = [attention.probe_attention(q[i], probe, k[i], scale) for i in range(config.heads)]
            probe_rows = int(probe.indices.size)
        else:
            per_head = [attention.causal_scores(q[i], k[i], scale) for i in range(config.heads)]
            probe_rows = 0

        agg = np.mean if policy.head_agg == "mean" else np.sum
        acc = agg([attention.accumulated_scores(s) for s in per_head], axis=0, dtype=np.float64)
        norm = agg([attention.normalized_scores(s) for s in per_head], axis=0, dtype=np.float64)
        acc = acc.astype(np.float32)
        norm = norm.astype(np.float32)

        lb, part = _layer_partition(policy, mode, acc, norm, n)
        partitions.append(part)
        imp = part.important

        attn = np.zeros((config.heads, n, d_head), dtype=np.float32)
        for i in range(config.heads):
            out_sub, _ = attention.restricted_attention(q[i], k[i], v[i], scale, imp)
            attn[i, imp, :] = out_sub
        proj = attn.transpose(1, 0, 2).reshape(n, config.d_model) @ lw.wo
        h = h + proj
        h_after_attn = h
        x2 = _rms_norm(h, lw.gain_mlp, config.norm_eps)
        h = h + _silu(x2 @ lw.w_up) @ lw.w_down

        cache.set_layer(layer, k, v, np.arange(n, dtype=np.int64))
        if not policy.quantize:
            cache.retain(layer, part)
        p_kept = int(imp.size)
        kv_rows = cache.rows(layer)
        reports.append(
            LayerReport(
                layer=layer,
                n=n,
                p=p_kept,
                ratio=p_kept / n,
                retained_mass=float(lb.retained_mass_fraction),
                attn_flops=metrics.attn_flops_sparse(p_kept, n, d_head, config.heads, probe_rows),
                kv_rows=kv_rows,
                probe_rows=probe_rows,
                kv_bytes=2 * config.heads * kv_rows * d_head * 4,
            )
        )
        if trace is not None:
            trace.append(
                {
                    "layer": layer,
                    "h_before": h_before.copy(),
                    "h_after_attn": h_after_attn.copy(),
                    "partition": part,
                    "accumulated": acc.copy(),
                    "normalized": norm.copy(),
                    "probe_rows": probe_rows,
                }
            )

    if policy.quantize:
        packed = kvcache.quantize_mixed(cache, partitions, policy.group_size)
        cache = kvcache.dequantize(packed)
        reports = [
            replace(r, kv_bytes=kvcache.layer_memory_bytes(packed, r.layer)) for r in reports
        ]

    logits = (h @ model.embedding.T).astype(np.float32)
    return logits, cache, reports


def decode_step(
    model: TinyTransformer, token: int, cache: kvcache.KVCache, position: int
) -> tuple[np.ndarray, kvcache.KVCache]:
    """One autoregressive step: append K/V everywhere, attend to the cache."""
    config = model.config
    if not 0 <= token < config.vocab_size:
        raise VocabError(f"token id {token} outside vocabulary")
    d_head = config.d_head
    scale = 1.0 / np.sqrt(d_head)
    h = model.embedding[int(token)]
    for layer, lw in enumerate(model.layers):
        x = _rms_norm(h, lw.gain_attn, config.norm_eps)
        q = (x @ lw.wq).reshape(config.heads, d_head)
        k = (x @ lw.wk).reshape(config.heads, d_head)
        v = (x @ lw.wv).reshape(config.heads, d_head)
        cache.append(layer, k, v, position)
        keys, values = cache.keys[layer], cache.values[layer]
        out = np.empty((config.heads, d_head), dtype=np.float32)
        for i in range(config.heads):
            logits = (keys[i] @ q[i]) * np.float32(scale)
            weights = numkit.masked_softmax_rows(
                logits[None, :], np.ones((1, logits.size), dtype=bool)
            )
            out[i] = weights[0] @ values[i]
        h = h + out.reshape(config.d_model) @ lw.wo
        x2 = _rms_norm(h, lw.gain_mlp, config.norm_eps)
        h = h + _silu(x2 @ lw.w_up) @ lw.w_down
    return (h @ model.embedding.T).astype(np.float32), cache


def generate(
    model: TinyTransformer,
    prompt: np.ndarray,
    steps: int,
    policy: SparsityPolicy,
    greedy: bool = True,
) -> tuple[list[int], metrics.RunReport]:
    """Prefill then `steps` decode steps; returns all tokens plus a report."""
    if steps < 0:
        raise BoundsError("steps must be >= 0")
    prompt = _check_tokens(prompt, model.config)
    logits, cache, reports = prefill(model, prompt, policy)
    tokens = [int(t) for t in prompt]
    rng = None if greedy else numkit.make_rng(numkit.derive_seed(model.config.seed, _SAMPLE_TAG))
    cur = logits[-1]
    decode_flops = 0
    for step in range(steps):
        if greedy:
            nxt = int(np.argmax(cur))
        else:
            z = cur.astype(np.float64) - cur.max()
            prob = np.exp(z) / np.exp(z).sum()
            nxt = int(rng.choice(prob.size, p=prob))
        tokens.append(nxt)
        cur, cache = decode_step(model, nxt, cache, position=prompt.size + step)
        decode_flops += sum(
            4 * cache.rows(layer) * model.config.d_head * model.config.heads
            for layer in range(model.config.layers)
        )
    report = metrics.build_run_report(
        policy=policy,
        layer_reports=reports,
        d_head=model.config.d_head,
        heads=model.config.heads,
        generated=tokens[prompt.size :],
        decode_attn_flops=decode_flops,
    )
    return tokens, report


# --- model checkpoints ----------------------------------------------------

CHECKPOINT_MAGIC = b"ZVTM"
CHECKPOINT_VERSION = 1


def save_model(model: TinyTransformer, path) -> None:
    """Write config header plus flat little-endian float32 weight blobs."""
    c = model.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIIIQd",
                CHECKPOINT_VERSION,
                c.layers,
                c.heads,
                c.d_model,
                c.vocab_size,
                c.max_seq,
                c.seed,
                c.norm_eps,
            )
        )
        fh.write(np.ascontiguousarray(model.embedding, dtype="<f4").tobytes())
        for lw in model.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_up, lw.w_down, lw.gain_attn, lw.gain_mlp):
                fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_model(path) -> TinyTransformer:
    """Read a checkpoint written by save_model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a model checkpoint (bad magic)")
    try:
        version, layers, heads, d_model, vocab, max_seq, seed, eps = struct.unpack_from(
            "<IIIIIIQd", blob, 4
        )
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = ModelConfig(
            layers=layers,
            heads=heads,
            d_model=d_model,
            vocab_size=vocab,
            max_seq=max_seq,
            seed=seed,
            norm_eps=eps,
        ).validate()
        offset = 4 + struct.calcsize("<IIIIIIQd")

        def take(rows: int, cols: int) -> np.ndarray:
            nonlocal offset
            arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
            offset += 4 * rows * cols
            return arr.reshape(rows, cols).copy()

        model = TinyTransformer(config=config, embedding=take(vocab, d_model))
        d, ff = d_model, config.d_ff
        for _ in range(layers):
            model.layers.append(
                LayerWeights(
                    wq=take(d, d),
                    wk=take(d, d),
                    wv=take(d, d),
                    wo=take(d, d),
                    w_up=take(d, ff),
                    w_down=take(ff, d),
                    gain_attn=take(1, d).reshape(d),
                    gain_mlp=take(1, d).reshape(d),
                )
            )
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if offset != len(blob):
        raise FormatError("checkpoint has trailing or missing bytes")
    return model
