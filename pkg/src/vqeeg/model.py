"""The vector-quantized transformer: patch projection with learnable
position embeddings, a channel-independent pre-norm encoder, nearest-
neighbor codebook quantization with a straight-through backward path, a
shallow decoder with an output projection, optional classification heads,
and bit-exact checkpoint serialization.

All activations are rank-4 (batch, channel, patch, feature); attention only
ever mixes the patch axis, so channels never see each other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .features import PatchConfig
from .numerics import (
    Parameter,
    Rng,
    Tensor,
    dropout,
    gather,
    gelu,
    layer_norm,
    matmul,
    mean,
    reshape,
    softmax,
    straight_through,
    transpose,
)
from .signal_io import WINDOW_SAMPLES

CHECKPOINT_MAGIC = b"EEGC"
CHECKPOINT_VERSION = 1

PRESETS = {
    "small": {"encoder_layers": 6, "codebook_size": 512},
    "base": {"encoder_layers": 8, "codebook_size": 1024},
    "large": {"encoder_layers": 12, "codebook_size": 2048},
}


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int
    codebook_size: int
    decoder_layers: int = 3
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 0  # 0 means 4 * hidden_dim
    dropout: float = 0.1
    n_classes: int = 0  # 0: no head; 2: one-logit binary; >2: one logit each
    patch: PatchConfig = field(default_factory=PatchConfig)
    window_len: int = WINDOW_SAMPLES

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        if self.hidden_dim % self.heads:
            raise ConfigError(
                f"hidden dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.codebook_size < 2:
            raise ConfigError("codebook needs at least two entries")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.n_classes == 1:
            raise ConfigError("n_classes must be 0 (no head) or >= 2")

    @property
    def feature_dim(self) -> int:
        return self.patch.feature_dim

    @property
    def n_patches(self) -> int:
        return self.patch.patch_count(self.window_len)

    @property
    def head_logits(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        kwargs = dict(PRESETS[name])
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_text(self) -> str:
        """Canonical key=value block (sorted keys) used inside checkpoints."""
        items = {
            "codebook_size": self.codebook_size,
            "decoder_layers": self.decoder_layers,
            "dropout": self.dropout,
            "encoder_layers": self.encoder_layers,
            "ffn_dim": self.ffn_dim,
            "heads": self.heads,
            "hidden_dim": self.hidden_dim,
            "n_classes": self.n_classes,
            "patch_len": self.patch.patch_len,
            "patch_log_eps": self.patch.log_eps,
            "patch_stride": self.patch.stride,
            "window_len": self.window_len,
        }
        return "".join(f"{k} = {items[k]!r}\n" for k in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        import ast

        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = ast.literal_eval(raw.strip())
        patch = PatchConfig(patch_len=values.pop("patch_len"),
                            stride=values.pop("patch_stride"),
                            log_eps=values.pop("patch_log_eps"))
        return cls(patch=patch, **values)


@dataclass
class TokenGrid:
    """Discrete code assignments for one window: C x N indices in [0, K)."""

    indices: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise DimensionError(f"token grid must be C x N, got {self.indices.shape}")
        if self.indices.size and (self.indices.min() < 0
                                  or self.indices.max() >= self.codebook_size):
            raise ConfigError("token index outside the codebook")


def embed(features, w_p: Parameter, w_pos: Parameter) -> Tensor:
    """Project patch features to hidden size and add position embeddings."""
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    if x.shape[-1] != w_p.shape[0]:
        raise DimensionError(
            f"feature dim {x.shape[-1]} does not match projection {w_p.shape}")
    if x.shape[-2] != w_pos.shape[0]:
        raise ConfigError(
            f"window has {x.shape[-2]} patches but position table has "
            f"{w_pos.shape[0]}; all windows must share patch geometry")
    return matmul(x, w_p) + w_pos


def quantize(h: Tensor, codebook: Parameter, sg_tape=None
             ) -> tuple[np.ndarray, Tensor, Tensor]:
    """Nearest codebook row per patch (ties -> lowest index).

    Returns (indices, quantized, rows): `quantized` forwards the selected
    rows to the decoder but routes its gradient straight through to `h`;
    `rows` is the plain differentiable gather used by the codebook loss
    term. With an SgTape, assignments are recorded/replayed so finite
    differences see frozen code choices.
    """
    if codebook.shape[0] < 1:
        raise ConfigError("empty codebook")
    d = codebook.shape[1]
    if h.shape[-1] != d:
        raise DimensionError(f"hidden dim {h.shape[-1]} vs codebook dim {d}")
    flat = h.data.reshape(-1, d)
    dist = ((flat * flat).sum(axis=1)[:, None]
            - 2.0 * flat @ codebook.data.T
            + (codebook.data * codebook.data).sum(axis=1)[None, :])
    indices = np.argmin(dist, axis=1).reshape(h.shape[:-1])
    if sg_tape is not None:
        indices = sg_tape.pass_through(indices)
    rows = gather(codebook, indices)
    if sg_tape is None:
        quantized = straight_through(h, rows)
    else:
        # additive surrogate h + sg[rows - h]: same value (up to rounding)
        # and the same gradient, but finite differences on the replayed
        # function see exactly the straight-through sensitivity
        offset = sg_tape.pass_through(rows.data - h.data)
        quantized = h + Tensor(offset, validate=False)
    return indices, quantized, rows


def head_forward(hhat: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """Mean-pool the decoder stream over channels and patches, then project
    to logits. hhat is (B, C, N, D); result is (B, n_logits)."""
    pooled = mean(hhat, axis=(1, 2))
    return matmul(pooled, weight) + bias


class TransformerLayer:
    """Pre-norm block: self-attention over patches, then a GELU FFN."""

    def __init__(self, name: str, cfg: ModelConfig, rng: Rng,
                 register) -> None:
        d, ffn = cfg.hidden_dim, cfg.ffn_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.rate = cfg.dropout

        def p(suffix, value):
            return register(Parameter(f"{name}.{suffix}", value))

        scale = 1.0 / np.sqrt(d)
        self.norm1_gain = p("norm1.gain", np.ones(d))
        self.norm1_bias = p("norm1.bias", np.zeros(d))
        self.wq = p("attn.wq", rng.normal((d, d), scale))
        self.bq = p("attn.bq", np.zeros(d))
        # no key bias: softmax over keys is exactly invariant to one
        self.wk = p("attn.wk", rng.normal((d, d), scale))
        self.wv = p("attn.wv", rng.normal((d, d), scale))
        self.bv = p("attn.bv", np.zeros(d))
        self.wo = p("attn.wo", rng.normal((d, d), scale))
        self.bo = p("attn.bo", np.zeros(d))
        self.norm2_gain = p("norm2.gain", np.ones(d))
        self.norm2_bias = p("norm2.bias", np.zeros(d))
        self.ffn_w1 = p("ffn.w1", rng.normal((d, ffn), scale))
        self.ffn_b1 = p("ffn.b1", np.zeros(ffn))
        self.ffn_w2 = p("ffn.w2", rng.normal((ffn, d), 1.0 / np.sqrt(ffn)))
        self.ffn_b2 = p("ffn.b2", np.zeros(d))

    def _attend(self, x: Tensor) -> Tensor:
        b, c, n, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return transpose(reshape(t, (b, c, n, h, hd)), (0, 1, 3, 2, 4))

        q = split(matmul(x, self.wq) + self.bq)
        k = split(matmul(x, self.wk))
        v = split(matmul(x, self.wv) + self.bv)
        scores = matmul(q, transpose(k, (0, 1, 2, 4, 3))) * (1.0 / np.sqrt(hd))
        ctx = matmul(softmax(scores, axis=-1), v)
        merged = reshape(transpose(ctx, (0, 1, 3, 2, 4)), (b, c, n, d))
        return matmul(merged, self.wo) + self.bo

    def __call__(self, x: Tensor, training: bool, rng: Rng | None) -> Tensor:
        a = self._attend(layer_norm(x, self.norm1_gain, self.norm1_bias))
        x = x + dropout(a, self.rate, rng, training)
        f = layer_norm(x, self.norm2_gain, self.norm2_bias)
        f = matmul(gelu(matmul(f, self.ffn_w1) + self.ffn_b1), self.ffn_w2) \
            + self.ffn_b2
        return x + dropout(f, self.rate, rng, training)


@dataclass
class ForwardState:
    """Intermediate nodes of one pretraining forward pass."""

    embedded: Tensor
    hidden: Tensor            # encoder output H
    indices: np.ndarray       # (B, C, N) code assignments
    quantized: Tensor         # straight-through decoder input
    rows: Tensor              # differentiable codebook gather
    decoder_stream: Tensor    # pre-projection decoder output H-hat
    reconstruction: Tensor    # (B, C, N, F)


class VQTransformer:
    """Encoder + codebook + decoder with a parameter registry."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.training = False
        self.dropout_rng: Rng | None = None
        self._params: dict[str, Parameter] = {}

        f, d, n, k = (config.feature_dim, config.hidden_dim,
                      config.n_patches, config.codebook_size)
        r_embed = rng.child("init.embed")
        self.w_p = self._register(
            Parameter("embed.w_p", r_embed.normal((f, d), 1.0 / np.sqrt(f))))
        self.w_pos = self._register(
            Parameter("embed.w_pos", r_embed.normal((n, d), 0.02)))

        r_enc = rng.child("init.encoder")
        self.encoder_layers = [
            TransformerLayer(f"encoder.layer{i}", config, r_enc, self._register)
            for i in range(config.encoder_layers)]

        r_q = rng.child("init.quantizer")
        self.codebook = self._register(
            Parameter("quantizer.codebook", r_q.uniform(-1.0 / k, 1.0 / k, (k, d))))

        r_dec = rng.child("init.decoder")
        self.decoder_layers = [
            TransformerLayer(f"decoder.layer{i}", config, r_dec, self._register)
            for i in range(config.decoder_layers)]
        r_proj = rng.child("init.project")
        self.w_o = self._register(
            Parameter("project.w_o", r_proj.normal((d, f), 1.0 / np.sqrt(d))))
        self.b_o = self._register(Parameter("project.b_o", np.zeros(f)))

        self.head_w: Parameter | None = None
        self.head_b: Parameter | None = None
        if config.n_classes:
            self._build_head(rng)

    def _register(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ConfigError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def _build_head(self, rng: Rng) -> None:
        r = rng.child("init.head")
        d, out = self.config.hidden_dim, self.config.head_logits
        self.head_w = self._register(
            Parameter("head.w", r.normal((d, out), 1.0 / np.sqrt(d))))
        self.head_b = self._register(Parameter("head.b", np.zeros(out)))

    def add_head(self, n_classes: int, rng: Rng) -> None:
        if self.head_w is not None:
            raise ConfigError("model already has a head")
        self.config = replace(self.config, n_classes=n_classes)
        self._build_head(rng)

    # -- modes ------------------------------------------------------------
    def train_mode(self, dropout_rng: Rng | None) -> None:
        if self.config.dropout > 0 and dropout_rng is None:
            raise ConfigError("training with dropout needs a dropout rng")
        self.training = True
        self.dropout_rng = dropout_rng

    def eval_mode(self) -> None:
        self.training = False

    # -- parameter access --------------------------------------------------
    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def head_parameters(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.name.startswith("head.")]

    def backbone_parameters(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.name.startswith("head.")]

    # -- forward pieces ----------------------------------------------------
    def encode(self, embedded: Tensor) -> Tensor:
        x = embedded
        for layer in self.encoder_layers:
            x = layer(x, self.training, self.dropout_rng)
        return x

    def decode(self, quantized: Tensor) -> tuple[Tensor, Tensor]:
        x = quantized
        for layer in self.decoder_layers:
            x = layer(x, self.training, self.dropout_rng)
        return x, matmul(x, self.w_o) + self.b_o

    def forward(self, features: np.ndarray, sg_tape=None) -> ForwardState:
        """Full pass over a (B, C, N, F) feature batch."""
        x = Tensor(np.asarray(features, dtype=np.float64))
        if x.ndim != 4:
            raise DimensionError(f"expected B x C x N x F features, got {x.shape}")
        embedded = embed(x, self.w_p, self.w_pos)
        hidden = self.encode(embedded)
        indices, quantized, rows = quantize(hidden, self.codebook, sg_tape)
        stream, recon = self.decode(quantized)
        return ForwardState(embedded, hidden, indices, quantized, rows,
                            stream, recon)

    def logits(self, features: np.ndarray, sg_tape=None
               ) -> tuple[Tensor, ForwardState]:
        if self.head_w is None:
            raise ConfigError("model has no classification head")
        state = self.forward(features, sg_tape)
        return head_forward(state.decoder_stream, self.head_w, self.head_b), state

    def tokenize(self, features: np.ndarray) -> list[TokenGrid]:
        """Eval-mode code assignment for each window in the batch."""
        was_training = self.training
        self.training = False
        try:
            state = self.forward(features)
        finally:
            self.training = was_training
        return [TokenGrid(idx, self.config.codebook_size)
                for idx in state.indices]

    # -- checkpoints ---------------------------------------------------------
    def to_checkpoint(self, step: int = 0, seed: int = 0) -> "Checkpoint":
        params = {name: p.data.copy() for name, p in self._params.items()}
        return Checkpoint(CHECKPOINT_VERSION, self.config, params, step, seed)

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        for name in sorted(self._params):
            if name not in params:
                raise FormatError(f"missing parameter {name!r}")
        for name in sorted(params):
            if name not in self._params:
                raise FormatError(f"unexpected parameter {name!r}")
            target = self._params[name]
            if params[name].shape != target.data.shape:
                raise FormatError(
                    f"shape mismatch for {name!r}: checkpoint has "
                    f"{params[name].shape}, model needs {target.data.shape}")
        for name, value in params.items():
            self._params[name].data[...] = value


@dataclass
class Checkpoint:
    """Named-parameter store plus the config that shaped it."""

    version: int
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    def build_model(self) -> VQTransformer:
        model = VQTransformer(self.config, Rng(self.seed).child("model"))
        model.load_parameters(self.params)
        return model


def save_checkpoint(source, path) -> None:
    """Serialize a model or Checkpoint to the binary checkpoint format."""
    ckpt = source.to_checkpoint() if isinstance(source, VQTransformer) else source
    config_text = ckpt.config.to_text() + \
        f"train_seed = {ckpt.seed!r}\ntrain_step = {ckpt.step!r}\n"
    encoded = config_text.encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", ckpt.version))
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            data = np.ascontiguousarray(ckpt.params[name], dtype=np.float64)
            encoded_name = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded_name)))
            f.write(encoded_name)
            f.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<Q", dim))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        (version,) = struct.unpack("<H", f.read(2))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        (config_len,) = struct.unpack("<I", f.read(4))
        offset = f.tell()
        config_text = f.read(config_len)
        if len(config_text) != config_len:
            raise FormatError("truncated config block", offset=offset)
        lines = []
        step = seed = 0
        for line in config_text.decode("utf-8").splitlines():
            key = line.partition("=")[0].strip()
            if key == "train_step":
                step = int(line.partition("=")[2].strip())
            elif key == "train_seed":
                seed = int(line.partition("=")[2].strip())
            else:
                lines.append(line)
        config = ModelConfig.from_text("\n".join(lines))
        (count,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            offset = f.tell()
            raw = f.read(2)
            if len(raw) != 2:
                raise FormatError("truncated parameter name length", offset=offset)
            (name_len,) = struct.unpack("<H", raw)
            name = f.read(name_len).decode("utf-8")
            offset = f.tell()
            raw = f.read(1)
            if len(raw) != 1:
                raise FormatError("truncated parameter rank", offset=offset)
            (rank,) = struct.unpack("<B", raw)
            dims = struct.unpack("<" + "Q" * rank, f.read(8 * rank))
            n_bytes = 8 * int(np.prod(dims)) if rank else 8
            offset = f.tell()
            payload = f.read(n_bytes)
            if len(payload) != n_bytes:
                raise FormatError(f"truncated data for parameter {name!r}",
                                  offset=offset)
            params[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return Checkpoint(version, config, params, step, seed)


def load_model(path) -> VQTransformer:
    """Read a checkpoint and reconstruct its model."""
    return load_checkpoint(path).build_model()
