"""Soft Graph Transformer: dual-stream attention detector with SISO interface.

One model layer applies, in order: self-attention over the symbol stream,
self-attention over the constraint stream, cross-attention that updates the
symbol stream by querying the constraint stream, then an FFN on each stream.
Every sublayer is pre-norm residual. The constraint stream is never updated
by cross-attention unless ``bidirectional_cross`` is set.

Variants:
  full-sgt            dual-stream model described above
  no-cross-attention  encoder over constraint tokens only; a learned matrix
                      compresses the 2N_r token axis down to 2N_t before the
                      output head (symbol priors are ignored)
  qr-baseline         encoder over QR-compressed tokens (y', R rows, sigma^2),
                      2N_t tokens wide
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .channel import MimoInstance, make_rng
from .tokens import TokenSet, llr_to_prob, prob_to_llr, tokenize

__all__ = [
    "VARIANTS",
    "SgtConfig",
    "SgtModel",
    "positional_encoding",
    "qr_compress_tokens",
    "embed",
    "self_attention",
    "cross_attention",
    "forward",
    "detect_soft",
    "detect_soft_batch",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("full-sgt", "no-cross-attention", "qr-baseline")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SgtConfig:
    n_t: int
    n_r: int
    d_model: int
    n_layers: int
    n_heads: int
    ffn_hidden: int
    bits_per_axis: int = 1
    variant: str = "full-sgt"
    weight_sharing: bool = False
    bidirectional_cross: bool = False
    use_positional_encoding: bool = True

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected {VARIANTS}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @property
    def lin_width(self) -> int:
        return 2 * self.n_t + 2

    @staticmethod
    def default_heads(d_model: int) -> int:
        """Head count keeping d_model / n_heads = 16."""
        return max(1, d_model // 16)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table [length, d_model]."""
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


# ---------------------------------------------------------------------------
# Parameter container

class SgtModel:
    """Parameter store for one network; all tensors are float64 leaves."""

    def __init__(self, config: SgtConfig, params: dict[str, T.Tensor]) -> None:
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: SgtConfig, seed: int) -> "SgtModel":
        rng = make_rng(seed, 0xA11)
        params: dict[str, T.Tensor] = {}

        def linear(name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.w"] = T.Tensor(
                rng.uniform(-bound, bound, size=(fan_in, fan_out))
            )
            if bias:
                params[f"{name}.b"] = T.Tensor(np.zeros(fan_out))

        def norm(name: str, width: int) -> None:
            params[f"{name}.g"] = T.Tensor(np.ones(width))
            params[f"{name}.b"] = T.Tensor(np.zeros(width))

        def attention(name: str, d: int) -> None:
            for proj in ("wq", "wk", "wv", "wo"):
                linear(f"{name}.{proj}", d, d, bias=False)

        def ffn(name: str, d: int, hidden: int, out: int | None = None) -> None:
            linear(f"{name}.fc1", d, hidden)
            linear(f"{name}.fc2", hidden, out if out is not None else d)

        d = config.d_model
        nb = config.bits_per_axis
        if config.variant == "full-sgt":
            ffn("sym_embed", nb, d, d)
            ffn("lin_embed", config.lin_width, d, d)
        else:
            # Single-stream encoders embed constraint-style tokens only.
            ffn("lin_embed", config.lin_width, d, d)

        layer_ids = ["shared"] if config.weight_sharing else [
            str(i) for i in range(config.n_layers)
        ]
        for lid in layer_ids:
            p = f"layer{lid}"
            if config.variant == "full-sgt":
                norm(f"{p}.sym_self.ln", d)
                attention(f"{p}.sym_self", d)
                norm(f"{p}.lin_self.ln", d)
                attention(f"{p}.lin_self", d)
                norm(f"{p}.cross.ln_q", d)
                norm(f"{p}.cross.ln_kv", d)
                attention(f"{p}.cross", d)
                if config.bidirectional_cross:
                    norm(f"{p}.rcross.ln_q", d)
                    norm(f"{p}.rcross.ln_kv", d)
                    attention(f"{p}.rcross", d)
                norm(f"{p}.sym_ffn.ln", d)
                ffn(f"{p}.sym_ffn", d, config.ffn_hidden)
                norm(f"{p}.lin_ffn.ln", d)
                ffn(f"{p}.lin_ffn", d, config.ffn_hidden)
            else:
                norm(f"{p}.lin_self.ln", d)
                attention(f"{p}.lin_self", d)
                norm(f"{p}.lin_ffn.ln", d)
                ffn(f"{p}.lin_ffn", d, config.ffn_hidden)

        if config.variant == "no-cross-attention":
            bound = 1.0 / np.sqrt(2 * config.n_r)
            params["compress.w"] = T.Tensor(
                rng.uniform(-bound, bound, size=(2 * config.n_r, 2 * config.n_t))
            )
        norm("final.ln", d)
        ffn("head", d, config.ffn_hidden, nb)
        return cls(config, params)

    def layer_prefix(self, i: int) -> str:
        return "layershared" if self.config.weight_sharing else f"layer{i}"

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, T.Tensor]:
        return dict(self.params)


# ---------------------------------------------------------------------------
# Sublayers

def _split_heads(x: T.Tensor, n_heads: int) -> T.Tensor:
    *lead, s, d = x.shape
    x = T.reshape(x, (*lead, s, n_heads, d // n_heads))
    return T.swap_axes(x, -3, -2)


def _merge_heads(x: T.Tensor) -> T.Tensor:
    x = T.swap_axes(x, -3, -2)
    *lead, s, h, dk = x.shape
    return T.reshape(x, (*lead, s, h * dk))


def _attention_core(
    q_in: T.Tensor,
    kv_in: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str,
    n_heads: int,
    probe=None,
) -> T.Tensor:
    """Multi-head scaled dot-product attention, no residual or norm."""
    with T.mac_scope("attn_proj"):
        q = T.matmul(q_in, params[f"{prefix}.wq.w"])
        k = T.matmul(kv_in, params[f"{prefix}.wk.w"])
        v = T.matmul(kv_in, params[f"{prefix}.wv.w"])
    dk = q.shape[-1] // n_heads
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    with T.mac_scope("attn_scores"):
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dk))
    weights = T.softmax_rows(scores)
    if probe is not None:
        probe(prefix, weights.data)
    with T.mac_scope("attn_mix"):
        mixed = T.matmul(weights, vh)
    with T.mac_scope("attn_proj"):
        return T.matmul(_merge_heads(mixed), params[f"{prefix}.wo.w"])


def _layer_norm(x: T.Tensor, params, prefix: str) -> T.Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def self_attention(
    x: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str,
    n_heads: int,
    probe=None,
) -> T.Tensor:
    """Pre-norm residual self-attention sublayer over one token stream."""
    normed = _layer_norm(x, params, f"{prefix}.ln")
    return T.add(x, _attention_core(normed, normed, params, prefix, n_heads, probe))


def cross_attention(
    queries: T.Tensor,
    keys_values: T.Tensor,
    params: dict[str, T.Tensor],
    prefix: str,
    n_heads: int,
    probe=None,
) -> T.Tensor:
    """Directed message passing: the query stream is updated, the other is not."""
    q = _layer_norm(queries, params, f"{prefix}.ln_q")
    kv = _layer_norm(keys_values, params, f"{prefix}.ln_kv")
    return T.add(queries, _attention_core(q, kv, params, prefix, n_heads, probe))


def _ffn_sublayer(x: T.Tensor, params, prefix: str) -> T.Tensor:
    normed = _layer_norm(x, params, f"{prefix}.ln")
    with T.mac_scope("ffn"):
        h = T.gelu(T.add(T.matmul(normed, params[f"{prefix}.fc1.w"]),
                         params[f"{prefix}.fc1.b"]))
        out = T.add(T.matmul(h, params[f"{prefix}.fc2.w"]),
                    params[f"{prefix}.fc2.b"])
    return T.add(x, out)


def _mlp(x: T.Tensor, params, prefix: str, scope: str) -> T.Tensor:
    with T.mac_scope(scope):
        h = T.gelu(T.add(T.matmul(x, params[f"{prefix}.fc1.w"]),
                         params[f"{prefix}.fc1.b"]))
        return T.add(T.matmul(h, params[f"{prefix}.fc2.w"]),
                     params[f"{prefix}.fc2.b"])


_PE_CACHE: dict[tuple[int, ...], T.Tensor] = {}


def _add_positional(x: T.Tensor, enabled: bool) -> T.Tensor:
    if not enabled:
        return x
    cached = _PE_CACHE.get(x.shape)
    if cached is None:
        pe = positional_encoding(x.shape[-2], x.shape[-1])
        cached = T.Tensor(np.broadcast_to(pe, x.shape).copy())
        if len(_PE_CACHE) > 64:
            _PE_CACHE.clear()
        _PE_CACHE[x.shape] = cached
    return T.add(x, cached)


# ---------------------------------------------------------------------------
# QR preprocessing for the baseline variant

def qr_compress_tokens(lin: np.ndarray) -> np.ndarray:
    """Compress constraint tokens via reduced QR of the embedded channel rows.

    Input rows are (y_j, h_j, sigma_j^2) with shape [2N_r, 2N_t + 2]; output
    rows are (y'_j, r_j, sigma_j^2) with shape [2N_t, 2N_t + 2] where
    H = QR and y' = Q^T y. White noise keeps its variance under Q^T.
    """
    if lin.ndim == 3:
        return np.stack([qr_compress_tokens(item) for item in lin])
    y = lin[:, 0]
    H = lin[:, 1:-1]
    sigma2 = lin[:, -1]
    q, r = np.linalg.qr(H)
    n = H.shape[1]
    return np.concatenate(
        [(q.T @ y)[:, None], r, sigma2[:n, None]], axis=1
    )


# ---------------------------------------------------------------------------
# Forward passes

def embed(tokens: TokenSet, model: SgtModel) -> tuple[T.Tensor, T.Tensor]:
    """Independent FFN embeddings of both token families plus positional code.

    Returns (sym_emb [*, 2N_t, d_model], lin_emb [*, 2N_r, d_model]).
    """
    cfg = model.config
    _check_token_shapes(tokens, cfg)
    sym = _mlp(T.Tensor(tokens.sym), model.params, "sym_embed", "embed")
    lin = _mlp(T.Tensor(tokens.lin), model.params, "lin_embed", "embed")
    return (
        _add_positional(sym, cfg.use_positional_encoding),
        _add_positional(lin, cfg.use_positional_encoding),
    )


def _check_token_shapes(tokens: TokenSet, cfg: SgtConfig) -> None:
    lt, st = tokens.lin.shape, tokens.sym.shape
    if lt[-2:] != (2 * cfg.n_r, cfg.lin_width):
        raise T.ShapeError(
            f"lin tokens {lt} do not match model dims "
            f"[{2 * cfg.n_r}, {cfg.lin_width}]"
        )
    if st[-2:] != (2 * cfg.n_t, cfg.bits_per_axis):
        raise T.ShapeError(
            f"sym tokens {st} do not match model dims "
            f"[{2 * cfg.n_t}, {cfg.bits_per_axis}]"
        )


def forward(
    tokens: TokenSet | MimoInstance,
    model: SgtModel,
    probe=None,
) -> T.Tensor:
    """Soft bit probabilities [*, 2N_t, N_bits/2], each strictly in (0, 1)."""
    if isinstance(tokens, MimoInstance):
        tokens = tokenize(tokens)
    cfg = model.config
    nh = cfg.n_heads
    P = model.params

    if cfg.variant == "full-sgt":
        sym, lin = embed(tokens, model)
        for i in range(cfg.n_layers):
            lp = model.layer_prefix(i)
            try:
                sym = self_attention(sym, P, f"{lp}.sym_self", nh, probe)
                lin = self_attention(lin, P, f"{lp}.lin_self", nh, probe)
                sym = cross_attention(sym, lin, P, f"{lp}.cross", nh, probe)
                if cfg.bidirectional_cross:
                    lin = cross_attention(lin, sym, P, f"{lp}.rcross", nh, probe)
                sym = _ffn_sublayer(sym, P, f"{lp}.sym_ffn")
                lin = _ffn_sublayer(lin, P, f"{lp}.lin_ffn")
            except T.NonFiniteError as e:
                raise T.NonFiniteError(f"layer {i}: {e}") from e
        final = sym
    else:
        _check_token_shapes(tokens, cfg)
        feats = tokens.lin
        if cfg.variant == "qr-baseline":
            feats = qr_compress_tokens(feats)
        lin = _mlp(T.Tensor(feats), P, "lin_embed", "embed")
        lin = _add_positional(lin, cfg.use_positional_encoding)
        for i in range(cfg.n_layers):
            lp = model.layer_prefix(i)
            try:
                lin = self_attention(lin, P, f"{lp}.lin_self", nh, probe)
                lin = _ffn_sublayer(lin, P, f"{lp}.lin_ffn")
            except T.NonFiniteError as e:
                raise T.NonFiniteError(f"layer {i}: {e}") from e
        if cfg.variant == "no-cross-attention":
            # Learned compression of the token axis: [*, 2N_r, d] -> [*, 2N_t, d].
            with T.mac_scope("compress"):
                lin = T.transpose(T.matmul(T.transpose(lin), P["compress.w"]))
        final = lin

    normed = _layer_norm(final, P, "final.ln")
    with T.mac_scope("head"):
        logits = _mlp(normed, P, "head", "head")
    return T.sigmoid(logits)


def detect_soft(
    inst: MimoInstance,
    model: SgtModel,
    prior_llrs: np.ndarray | None = None,
) -> np.ndarray:
    """Posterior LLR matrix [2N_t, N_bits/2] for one instance.

    Soft input: optional prior LLRs are squashed to probabilities and carried
    in the symbol tokens; absent priors mean the uninformative 0.5.
    """
    priors = None if prior_llrs is None else llr_to_prob(prior_llrs)
    out = forward(tokenize(inst, priors), model)
    return prob_to_llr(out.data)


def detect_soft_batch(
    tokens: TokenSet, model: SgtModel
) -> np.ndarray:
    """Posterior LLRs [B, 2N_t, N_bits/2] for a batched TokenSet."""
    return prob_to_llr(forward(tokens, model).data)


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, model: SgtModel) -> None:
    """Versioned self-describing archive: config JSON + named float64 blobs.

    Parameters are stored explicitly little-endian ('<f8') inside an npz.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
    }
    arrays = {
        f"param/{name}": t.data.astype("<f8")
        for name, t in model.params.items()
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> SgtModel:
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {meta['format_version']}"
            )
        config = SgtConfig(**meta["config"])
        params = {
            k[len("param/"):]: T.Tensor(data[k].astype(np.float64))
            for k in data.files
            if k.startswith("param/")
        }
    model = SgtModel(config, params)
    expected = set(SgtModel.init(config, seed=0).params)
    if set(params) != expected:
        missing = expected - set(params)
        extra = set(params) - expected
        raise ValueError(
            f"checkpoint parameters do not match config: missing={sorted(missing)} "
            f"extra={sorted(extra)}"
        )
    return model
