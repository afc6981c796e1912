"""Dual-encoder model: a hypothesis encoder that keeps time alignment and a
query encoder with a CLS-driven minimum-length head, on top of a Transformer
stack whose parameters the two pipelines can share.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ParameterSet, Tensor
from .confnet import GraphemeInventory, Query, Segment, featurize_window
from .errors import CheckpointError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    """Model hyperparameters. Defaults follow the BERT-Mini block."""

    layers: int = 4
    heads: int = 4
    d_model: int = 256
    d_ff: int = 1024
    dropout: float = 0.15
    conv_width: int = 3
    conv_stride: int = 2
    mask_band: int = 2
    n_input: int = 256  # hypothesis window length, in segments
    m_query: int = 16  # maximum query length, in graphemes
    share_transformer: bool = True
    languages: tuple[str, ...] = ("lang0",)
    mask_hypothesis: bool = True  # band-limit hypothesis self-attention
    mask_query: bool = False  # band-limit query self-attention too

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.conv_width % 2 != 1:
            raise ValueError(f"conv_width must be odd, got {self.conv_width}")
        if self.mask_band < 0:
            raise ValueError("mask_band must be >= 0")
        for name in ("layers", "heads", "d_model", "d_ff", "conv_width", "conv_stride", "n_input", "m_query"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.languages = tuple(self.languages)

    @property
    def hyp_positions(self) -> int:
        return -(-self.n_input // self.conv_stride)

    @property
    def query_embeddings(self) -> int:
        # K: query embedding count after the strided convolution
        return -(-self.m_query // self.conv_stride)


def build_band_mask(n: int, band: int) -> Tensor:
    """0/1 mask with ones on the diagonal and ``band`` super-/sub-diagonals."""
    if n < 1 or band < 0:
        raise ValueError(f"need n >= 1 and band >= 0, got n={n}, band={band}")
    idx = np.arange(n)
    return Tensor((np.abs(idx[:, None] - idx[None, :]) <= band).astype(ag.DEFAULT_DTYPE))


def transformer_param_count(layers: int, d_model: int, d_ff: int) -> int:
    """Closed-form trainable-scalar count of one Transformer stack."""
    attn = 4 * (d_model * d_model + d_model)
    ff = (d_model * d_ff + d_ff) + (d_ff * d_model + d_model)
    norms = 2 * 2 * d_model
    return layers * (attn + ff + norms)


class EncoderModel:
    """Both encoder pipelines plus the calibration scalars.

    With ``share_transformer`` the two pipelines resolve to the identical
    Transformer tensors (same storage), so a gradient step driven through
    either pipeline moves both.
    """

    def __init__(self, config: EncoderConfig, inventory: GraphemeInventory, seed: int = 0):
        self.config = config
        self.inventory = inventory
        self.rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        self._build()

    # -- construction -------------------------------------------------------

    def _param(self, name: str, shape, init: str = "trunc_normal") -> Tensor:
        if init == "zeros":
            data = np.zeros(shape, dtype=ag.DEFAULT_DTYPE)
        elif init == "ones":
            data = np.ones(shape, dtype=ag.DEFAULT_DTYPE)
        else:
            data = ag.trunc_normal(self.rng, shape, std=0.02)
        return self.params.add(name, Tensor(data))

    def _build_stack(self, prefix: str) -> None:
        c = self.config
        for layer in range(c.layers):
            p = f"{prefix}.l{layer}"
            for proj in ("wq", "wk", "wv", "wo"):
                self._param(f"{p}.attn.{proj}", (c.d_model, c.d_model))
                self._param(f"{p}.attn.b{proj[1]}", (c.d_model,), init="zeros")
            self._param(f"{p}.ff.w1", (c.d_model, c.d_ff))
            self._param(f"{p}.ff.b1", (c.d_ff,), init="zeros")
            self._param(f"{p}.ff.w2", (c.d_ff, c.d_model))
            self._param(f"{p}.ff.b2", (c.d_model,), init="zeros")
            self._param(f"{p}.ln1.g", (c.d_model,), init="ones")
            self._param(f"{p}.ln1.b", (c.d_model,), init="zeros")
            self._param(f"{p}.ln2.g", (c.d_model,), init="ones")
            self._param(f"{p}.ln2.b", (c.d_model,), init="zeros")

    def _build(self) -> None:
        c = self.config
        vocab = len(self.inventory)
        if c.share_transformer:
            self._build_stack("trf")
            self._hyp_prefix = self._query_prefix = "trf"
        else:
            self._build_stack("hyp_trf")
            self._build_stack("query_trf")
            self._hyp_prefix = "hyp_trf"
            self._query_prefix = "query_trf"

        self._param("hyp.embed", (vocab, c.d_model))
        self._param("hyp.dur", (1, c.d_model))
        self._param("hyp.conv.w", (c.conv_width, c.d_model, c.d_model))
        self._param("hyp.conv.b", (c.d_model,), init="zeros")
        self._param("hyp.pos", (c.hyp_positions, c.d_model))
        self._param("hyp.up.w", (c.conv_width, c.d_model, c.d_model))
        self._param("hyp.up.b", (c.d_model,), init="zeros")

        self._param("query.embed", (vocab, c.d_model))
        self._param("query.cls", (1, c.d_model))
        self._param("query.conv.w", (c.conv_width, c.d_model, c.d_model))
        self._param("query.conv.b", (c.d_model,), init="zeros")
        self._param("query.pos", (c.query_embeddings + 1, c.d_model))
        self._param("query.len.w", (c.d_model, 1))
        self._param("query.len.b", (1,), init="zeros")

        self.params.add("calib.alpha", Tensor(np.ones(1, dtype=ag.DEFAULT_DTYPE)))
        self.params.add("calib.beta", Tensor(np.zeros(1, dtype=ag.DEFAULT_DTYPE)))

        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def alpha(self) -> Tensor:
        return self.params["calib.alpha"]

    @property
    def beta(self) -> Tensor:
        return self.params["calib.beta"]

    # -- forward ------------------------------------------------------------

    def _mask(self, n: int, band: int | None) -> np.ndarray:
        key = (n, -1 if band is None else band)
        if key not in self._mask_cache:
            if band is None:
                self._mask_cache[key] = np.ones((n, n), dtype=ag.DEFAULT_DTYPE)
            else:
                self._mask_cache[key] = build_band_mask(n, band).data
        return self._mask_cache[key]

    def _transformer(self, x: Tensor, mask: np.ndarray, prefix: str, training: bool) -> Tensor:
        c = self.config
        for layer in range(c.layers):
            p = self.params
            name = f"{prefix}.l{layer}"
            q = x @ p[f"{name}.attn.wq"] + p[f"{name}.attn.bq"]
            k = x @ p[f"{name}.attn.wk"] + p[f"{name}.attn.bk"]
            v = x @ p[f"{name}.attn.wv"] + p[f"{name}.attn.bv"]
            a = ag.multi_head_attention(q, k, v, mask, c.heads)
            a = a @ p[f"{name}.attn.wo"] + p[f"{name}.attn.bo"]
            a = ag.dropout(a, c.dropout, self.rng, training)
            x = ag.layer_norm(x + a, p[f"{name}.ln1.g"], p[f"{name}.ln1.b"])
            h = ag.gelu(x @ p[f"{name}.ff.w1"] + p[f"{name}.ff.b1"])
            h = h @ p[f"{name}.ff.w2"] + p[f"{name}.ff.b2"]
            h = ag.dropout(h, c.dropout, self.rng, training)
            x = ag.layer_norm(x + h, p[f"{name}.ln2.g"], p[f"{name}.ln2.b"])
        return x

    def encode_hypothesis(self, segments: list[Segment], training: bool = False) -> Tensor:
        """Encode one window of N segments into N time-aligned output rows."""
        c = self.config
        if len(segments) != c.n_input:
            raise ShapeError(f"hypothesis window must have {c.n_input} segments, got {len(segments)}")
        p = self.params
        x = featurize_window(segments, p["hyp.embed"], p["hyp.dur"])
        x = ag.gelu(ag.conv1d(x, p["hyp.conv.w"], p["hyp.conv.b"], c.conv_stride, c.conv_width // 2))
        x = x + p["hyp.pos"]
        x = ag.dropout(x, c.dropout, self.rng, training)
        mask = self._mask(c.hyp_positions, c.mask_band if c.mask_hypothesis else None)
        x = self._transformer(x, mask, self._hyp_prefix, training)
        return ag.conv1d_transposed(x, p["hyp.up.w"], p["hyp.up.b"], c.conv_stride, c.n_input)

    def encode_query(self, query: Query, training: bool = False) -> tuple[Tensor, Tensor]:
        """Encode a query into (K query embeddings, scalar length estimate)."""
        c = self.config
        if len(query) > c.m_query:
            raise ShapeError(f"query has {len(query)} graphemes, maximum is {c.m_query}")
        if len(query) < 1:
            raise ShapeError("query is empty")
        ids = list(query.graphemes) + [self.inventory.pad_id] * (c.m_query - len(query))
        p = self.params
        x = ag.embedding(p["query.embed"], ids)
        x = ag.gelu(ag.conv1d(x, p["query.conv.w"], p["query.conv.b"], c.conv_stride, c.conv_width // 2))
        # CLS bypasses the convolution and is prepended to its output
        x = ag.concat_rows(p["query.cls"], x)
        x = x + p["query.pos"]
        x = ag.dropout(x, c.dropout, self.rng, training)
        k = c.query_embeddings
        mask = self._mask(k + 1, c.mask_band if c.mask_query else None)
        x = self._transformer(x, mask, self._query_prefix, training)
        length = ag.matmul(ag.slice_rows(x, 0, 1), p["query.len.w"]) + p["query.len.b"]
        return ag.slice_rows(x, 1, k + 1), length


def count_params(model: EncoderModel) -> int:
    """Total trainable scalars; shared tensors are counted once."""
    return model.params.total_size()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: EncoderModel, path) -> None:
    """Write parameters, config, inventory, and RNG state to one .npz file."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "inventory": model.inventory.languages,
        "rng": model.rng.bit_generator.state,
    }
    arrays = {f"param/{name}": t.data for name, t in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> EncoderModel:
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise CheckpointError(f"{path}: not a model checkpoint (missing metadata)")
            meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
            version = meta.get("version")
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: checkpoint version {version} not supported (expected {CHECKPOINT_VERSION}); "
                    f"re-train or convert the checkpoint"
                )
            config = EncoderConfig(**meta["config"])
            inventory = GraphemeInventory(meta["inventory"])
            model = EncoderModel(config, inventory, seed=0)
            for name, tensor in model.params.items():
                key = f"param/{name}"
                if key not in data:
                    raise CheckpointError(f"{path}: missing parameter {name}")
                stored = data[key]
                if stored.shape != tensor.data.shape:
                    raise CheckpointError(f"{path}: parameter {name} has shape {stored.shape}, expected {tensor.data.shape}")
                tensor.data[...] = stored
            model.rng.bit_generator.state = meta["rng"]
    except (OSError, ValueError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot load checkpoint {path}: {e}") from e
    return model
