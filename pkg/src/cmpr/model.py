"""Toy-scale twin-encoder architecture.

Per modality: a small pre-norm vision transformer (patch embedding +
learned positions, self-attention blocks, mean-pooled tokens), a linear
projection head for the contrastive space, a 2-layer GELU MLP for measure
prediction, and a transposed-convolution decoder for reconstruction.

By default the prediction and decoding heads read the pre-projection
encoder embedding (it preserves more information); set
``heads_on_projection`` to tap the projected embedding instead.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError, DimensionError

MODALITIES = ("fundus", "carotid")
MLP_RATIO = 2  # encoder MLP hidden width as a multiple of embed_dim
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 1
    proj_dim: int = 32
    pred_hidden: int = 32
    n_measures: int = 4
    decoder_channels: list[int] = field(default_factory=lambda: [32, 16])
    heads_on_projection: bool = False

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "proj_dim",
                     "pred_hidden"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2")
        if self.depth < 1 or self.heads < 1 or self.n_measures < 1:
            raise ConfigError("depth, heads and n_measures must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not self.decoder_channels:
            raise ConfigError("decoder_channels must not be empty")
        # each deconv layer (kernel 2, stride 2) exactly doubles spatial size
        factor = 2 ** len(self.decoder_channels)
        if self.image_size % factor != 0 or self.image_size // factor < 1:
            raise ConfigError(
                f"decoder with {len(self.decoder_channels)} stride-2 layers "
                f"cannot reach {self.image_size}x{self.image_size}"
            )

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def head_input_dim(self) -> int:
        return self.proj_dim if self.heads_on_projection else self.embed_dim

    @property
    def decoder_seed_hw(self) -> int:
        return self.image_size // 2 ** len(self.decoder_channels)

    @property
    def decoder_chain(self) -> list[int]:
        return [*self.decoder_channels, 3]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """Flat named parameter store; groups are addressed by dotted prefix."""

    arrays: "OrderedDict[str, np.ndarray]"

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith(prefix)}

    @property
    def fundus_encoder(self) -> dict[str, np.ndarray]:
        return {**self.subset("fundus.patch"), **self.subset("fundus.pos"),
                **self.subset("fundus.block")}

    @property
    def carotid_encoder(self) -> dict[str, np.ndarray]:
        return {**self.subset("carotid.patch"), **self.subset("carotid.pos"),
                **self.subset("carotid.block")}

    @property
    def fundus_proj(self) -> dict[str, np.ndarray]:
        return self.subset("fundus.proj")

    @property
    def carotid_proj(self) -> dict[str, np.ndarray]:
        return self.subset("carotid.proj")

    @property
    def fundus_pred(self) -> dict[str, np.ndarray]:
        return self.subset("fundus.pred")

    @property
    def carotid_pred(self) -> dict[str, np.ndarray]:
        return self.subset("carotid.pred")

    @property
    def fundus_dec(self) -> dict[str, np.ndarray]:
        return self.subset("fundus.dec")

    @property
    def carotid_dec(self) -> dict[str, np.ndarray]:
        return self.subset("carotid.dec")

    @property
    def log_tau(self) -> np.ndarray | None:
        return self.arrays.get("log_tau")

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.copy()) for k, v in self.arrays.items()))


class ParamView:
    """Wraps parameter arrays as tape leaves on first use.

    Tracks which parameters the forward pass touched, so the optimizer can
    update exactly those.
    """

    def __init__(self, tape: Tape, params: ModelParams):
        self.tape = tape
        self._params = params
        self._leaves: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._leaves:
            if name not in self._params.arrays:
                raise ContractError(f"unknown parameter {name!r}")
            self._leaves[name] = self.tape.leaf(self._params.arrays[name], name=name)
        return self._leaves[name]

    def used(self) -> dict[str, Tensor]:
        return dict(self._leaves)


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD):
    """Normal(0, std) with resampling of draws beyond two sigma."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(
    config: EncoderConfig, seed: int, learnable_tau_init: float | None = None
) -> ModelParams:
    """Deterministic parameter initialization.

    Weights are truncated-normal (std 0.02), biases and layer-norm shifts
    zero, layer-norm scales one.  ``learnable_tau_init`` adds a ``log_tau``
    scalar initialized to log of the given temperature.
    """
    rng = np.random.default_rng(seed)
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()

    def w(name, shape):
        arrays[name] = truncated_normal(rng, shape)

    def zeros(name, shape):
        arrays[name] = np.zeros(shape, dtype=np.float64)

    def ones(name, shape):
        arrays[name] = np.ones(shape, dtype=np.float64)

    d = config.embed_dim
    for m in MODALITIES:
        w(f"{m}.patch.w", (config.patch_dim, d))
        zeros(f"{m}.patch.b", (d,))
        w(f"{m}.pos", (config.n_tokens, d))
        for i in range(config.depth):
            p = f"{m}.block{i}"
            ones(f"{p}.ln1.g", (d,))
            zeros(f"{p}.ln1.b", (d,))
            for proj in ("q", "k", "v", "o"):
                w(f"{p}.attn.w{proj}", (d, d))
                zeros(f"{p}.attn.b{proj}", (d,))
            ones(f"{p}.ln2.g", (d,))
            zeros(f"{p}.ln2.b", (d,))
            w(f"{p}.mlp.w1", (d, MLP_RATIO * d))
            zeros(f"{p}.mlp.b1", (MLP_RATIO * d,))
            w(f"{p}.mlp.w2", (MLP_RATIO * d, d))
            zeros(f"{p}.mlp.b2", (d,))
        w(f"{m}.proj.w", (d, config.proj_dim))
        zeros(f"{m}.proj.b", (config.proj_dim,))
        head_in = config.head_input_dim
        w(f"{m}.pred.w1", (head_in, config.pred_hidden))
        zeros(f"{m}.pred.b1", (config.pred_hidden,))
        w(f"{m}.pred.w2", (config.pred_hidden, config.n_measures))
        zeros(f"{m}.pred.b2", (config.n_measures,))
        c0 = config.decoder_channels[0]
        hw = config.decoder_seed_hw
        w(f"{m}.dec.seed.w", (head_in, c0 * hw * hw))
        zeros(f"{m}.dec.seed.b", (c0 * hw * hw,))
        chain = config.decoder_chain
        for i in range(len(chain) - 1):
            w(f"{m}.dec.conv{i}.k", (chain[i], chain[i + 1], 2, 2))
    if learnable_tau_init is not None:
        arrays["log_tau"] = np.asarray(math.log(learnable_tau_init), dtype=np.float64)
    return ModelParams(arrays)


def expected_param_count(config: EncoderConfig, learnable_tau: bool = False) -> int:
    """Closed-form parameter count for a config (both modalities)."""
    d = config.embed_dim
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + (
        d * MLP_RATIO * d + MLP_RATIO * d + MLP_RATIO * d * d + d
    )
    enc = config.patch_dim * d + d + config.n_tokens * d + config.depth * per_block
    proj = d * config.proj_dim + config.proj_dim
    head_in = config.head_input_dim
    pred = head_in * config.pred_hidden + config.pred_hidden + (
        config.pred_hidden * config.n_measures + config.n_measures
    )
    hw = config.decoder_seed_hw
    c0 = config.decoder_channels[0]
    dec = head_in * c0 * hw * hw + c0 * hw * hw
    chain = config.decoder_chain
    for i in range(len(chain) - 1):
        dec += chain[i] * chain[i + 1] * 4
    return 2 * (enc + proj + pred + dec) + (1 if learnable_tau else 0)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, 3, H, W) -> (N, T, 3*patch*patch), raster order, channel-major."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(n, gh * gw, c * patch * patch)


def _validate_images(images: np.ndarray, config: EncoderConfig) -> None:
    if images.ndim != 4 or images.shape[1] != 3 or (
        images.shape[2] != config.image_size or images.shape[3] != config.image_size
    ):
        raise DimensionError(
            f"expected (N, 3, {config.image_size}, {config.image_size}) images, "
            f"got {images.shape}"
        )
    if images.min() < 0.0 or images.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")


def _linear(view: ParamView, name: str, x: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, view[f"{name}.w"]), view[f"{name}.b"])


def _attention(view: ParamView, prefix: str, x3: Tensor, config: EncoderConfig):
    n, t, d = x3.shape
    h = config.heads
    dh = d // h
    flat = ad.reshape(x3, (n * t, d))

    def project(tag):
        z = ad.add_bias(
            ad.matmul(flat, view[f"{prefix}.w{tag}"]), view[f"{prefix}.b{tag}"]
        )
        z = ad.reshape(z, (n, t, h, dh))
        z = ad.transpose(z, (0, 2, 1, 3))
        return ad.reshape(z, (n * h, t, dh))

    q, k, v = project("q"), project("k"), project("v")
    scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = ad.bmm(ad.softmax(scores), v)
    ctx = ad.reshape(ctx, (n, h, t, dh))
    ctx = ad.transpose(ctx, (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (n * t, d))
    out = ad.add_bias(ad.matmul(ctx, view[f"{prefix}.wo"]), view[f"{prefix}.bo"])
    return ad.reshape(out, (n, t, d))


def _mlp(view: ParamView, prefix: str, x3: Tensor) -> Tensor:
    n, t, d = x3.shape
    flat = ad.reshape(x3, (n * t, d))
    hdn = ad.gelu(ad.add_bias(ad.matmul(flat, view[f"{prefix}.w1"]),
                              view[f"{prefix}.b1"]))
    out = ad.add_bias(ad.matmul(hdn, view[f"{prefix}.w2"]), view[f"{prefix}.b2"])
    return ad.reshape(out, (n, t, d))


def encode(
    view: ParamView, config: EncoderConfig, images: np.ndarray, modality: str
) -> Tensor:
    """Images -> mean-pooled transformer embedding (N, embed_dim)."""
    if modality not in MODALITIES:
        raise ContractError(f"unknown modality {modality!r}")
    _validate_images(images, config)
    pa = patchify(images, config.patch_size)
    n, t, pd = pa.shape
    x = view.tape.leaf(pa.reshape(n * t, pd), name=f"{modality}.pixels")
    tok = ad.add_bias(
        ad.matmul(x, view[f"{modality}.patch.w"]), view[f"{modality}.patch.b"]
    )
    x3 = ad.reshape(tok, (n, t, config.embed_dim))
    x3 = ad.add_bias(x3, view[f"{modality}.pos"])
    for i in range(config.depth):
        p = f"{modality}.block{i}"
        normed = ad.layer_norm(x3, view[f"{p}.ln1.g"], view[f"{p}.ln1.b"])
        x3 = ad.add(x3, _attention(view, f"{p}.attn", normed, config))
        normed = ad.layer_norm(x3, view[f"{p}.ln2.g"], view[f"{p}.ln2.b"])
        x3 = ad.add(x3, _mlp(view, f"{p}.mlp", normed))
    return ad.mean_axis(x3, 1)


def project(view: ParamView, config: EncoderConfig, emb: Tensor, modality: str):
    """Affine map into the contrastive space; not normalized here."""
    if emb.shape[-1] != config.embed_dim:
        raise DimensionError(
            f"expected embeddings of width {config.embed_dim}, got {emb.shape}"
        )
    return _linear(view, f"{modality}.proj", emb)


def predict_measures(
    view: ParamView, config: EncoderConfig, emb: Tensor, modality: str
) -> Tensor:
    """linear -> GELU -> linear measure predictions, (N, n_measures)."""
    if emb.shape[-1] != config.head_input_dim:
        raise DimensionError(
            f"prediction head expects width {config.head_input_dim}, "
            f"got {emb.shape}"
        )
    hdn = ad.gelu(
        ad.add_bias(ad.matmul(emb, view[f"{modality}.pred.w1"]),
                    view[f"{modality}.pred.b1"])
    )
    return ad.add_bias(ad.matmul(hdn, view[f"{modality}.pred.w2"]),
                       view[f"{modality}.pred.b2"])


def decode(
    view: ParamView, config: EncoderConfig, emb: Tensor, modality: str
) -> Tensor:
    """Embedding -> seed feature map -> stride-2 deconv stack -> image."""
    if emb.shape[-1] != config.head_input_dim:
        raise DimensionError(
            f"decoder expects width {config.head_input_dim}, got {emb.shape}"
        )
    n = emb.shape[0]
    hw = config.decoder_seed_hw
    c0 = config.decoder_channels[0]
    seed = ad.add_bias(ad.matmul(emb, view[f"{modality}.dec.seed.w"]),
                       view[f"{modality}.dec.seed.b"])
    x = ad.reshape(seed, (n, c0, hw, hw))
    chain = config.decoder_chain
    for i in range(len(chain) - 1):
        x = ad.transposed_conv2d(x, view[f"{modality}.dec.conv{i}.k"], stride=2)
        if i < len(chain) - 2:
            x = ad.gelu(x)
    return x


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_PARAM_PREFIX = "param/"
_AUX_PREFIX = "aux/"


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    config: EncoderConfig,
    step: int,
    manifest_extra: dict | None = None,
    aux_arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """Write the shared CMPR bundle: manifest + named parameter arrays.

    ``aux_arrays`` carries optimizer moments and similar sidecar state.
    Everything is stored float64 so resumed runs are bitwise identical.
    """
    manifest = {
        "kind": "checkpoint",
        "step": int(step),
        "encoder_config": config.to_dict(),
        "extra": manifest_extra or {},
    }
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, arr in params.arrays.items():
        arrays[_PARAM_PREFIX + name] = arr
    for name, arr in (aux_arrays or {}).items():
        arrays[_AUX_PREFIX + name] = arr
    arrayio.write_bundle(path, manifest, arrays, dtype="f64")


def load_checkpoint(path: str | Path):
    """Read back (params, config, step, manifest_extra, aux_arrays)."""
    manifest, arrays = arrayio.read_bundle(path)
    if manifest.get("kind") != "checkpoint":
        raise ContractError(f"{path} is not a checkpoint bundle")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    aux: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith(_PARAM_PREFIX):
            params[name[len(_PARAM_PREFIX):]] = arr
        elif name.startswith(_AUX_PREFIX):
            aux[name[len(_AUX_PREFIX):]] = arr
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    return (
        ModelParams(params),
        config,
        int(manifest["step"]),
        manifest.get("extra", {}),
        aux,
    )
