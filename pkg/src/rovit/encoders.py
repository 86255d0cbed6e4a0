"""Tiny dual encoder: patch ViT image tower and token transformer text tower.

Both towers are pre-norm transformers whose outputs are mean-pooled and
L2-normalized.  Parameters live in one flat, ordered ``name -> Tensor`` dict
so optimizers, freezing and checkpoints all work off names:

* ``image.*``  the image backbone
* ``text.*``   the text tower
* ``logit_temp`` the log of the contrastive temperature
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .pe import CpeConfig, batched_cpe, crop_coordinates, sample_crop_region, sincos_pe

PE_MODES = ("learnable", "cpe", "sincos", "none", "feat_crop_resize")

CKPT_MAGIC = b"ROVT"
CKPT_VERSION = 1


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    pe_mode: str = "learnable"
    # pixel standardization; defaults are the synthetic corpus statistics
    pixel_mean: float = 0.14
    pixel_std: float = 0.145

    def __post_init__(self):
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be > 0")
        if self.image_size % self.patch_size:
            raise DimensionError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise DimensionError("dim must be divisible by heads")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")

    @property
    def grid(self):
        return self.image_size // self.patch_size


@dataclass
class TextConfig:
    vocab_size: int = 64
    max_len: int = 16
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.dim % self.heads:
            raise DimensionError("dim must be divisible by heads")


def desk_cpe_config(vit: VitConfig) -> CpeConfig:
    """CPE settings scaled to the grid: 4x upsampling, crop resized back to the grid."""
    return CpeConfig(upsample_size=4 * vit.grid, out_size=vit.grid)


# ---------------------------------------------------------------- image plumbing

def patchify(image, patch_size: int) -> np.ndarray:
    """(H, W, C) or (B, H, W, C) -> (..., H/p * W/p, p*p*C), row-major over patches."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 3
    if squeeze:
        image = image[None]
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    x = image.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, (h // p) * (w // p), p * p * c)
    return x[0] if squeeze else x


def unpatchify(patches, patch_size: int, h: int, w: int, c: int) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches[None]
    b = patches.shape[0]
    p = patch_size
    x = patches.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, h, w, c)
    return x[0] if squeeze else x


# ---------------------------------------------------------------- transformer

def _init_block(params, prefix, dim, mlp_ratio, rng):
    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    hidden = dim * mlp_ratio
    spec = {
        "ln1.g": np.ones(dim), "ln1.b": np.zeros(dim),
        "attn.wq": dense(dim, dim), "attn.bq": np.zeros(dim),
        "attn.wk": dense(dim, dim), "attn.bk": np.zeros(dim),
        "attn.wv": dense(dim, dim), "attn.bv": np.zeros(dim),
        "attn.wo": dense(dim, dim), "attn.bo": np.zeros(dim),
        "ln2.g": np.ones(dim), "ln2.b": np.zeros(dim),
        "mlp.w1": dense(dim, hidden), "mlp.b1": np.zeros(hidden),
        "mlp.w2": dense(hidden, dim), "mlp.b2": np.zeros(dim),
    }
    for k, v in spec.items():
        params[f"{prefix}.{k}"] = Tensor(v, requires_grad=True, name=f"{prefix}.{k}")


def self_attention(x, p, heads, key_bias=None):
    """Multi-head self-attention on (B, N, D); returns (output, attention weights)."""
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ p["wq"] + p["bq"])
    k = split(x @ p["wk"] + p["bk"])
    v = split(x @ p["wv"] + p["bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    if key_bias is not None:
        scores = scores + key_bias
    attn = ad.softmax(scores, axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return out @ p["wo"] + p["bo"], attn


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def attention_block(x, params, heads, key_bias=None):
    """Pre-norm residual block: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    h = ad.layer_norm(x, params["ln1.g"], params["ln1.b"])
    a, _ = self_attention(h, _sub(params, "attn"), heads, key_bias)
    x = x + a
    h = ad.layer_norm(x, params["ln2.g"], params["ln2.b"])
    h = ad.gelu(h @ params["mlp.w1"] + params["mlp.b1"]) @ params["mlp.w2"] + params["mlp.b2"]
    return x + h


# ---------------------------------------------------------------- dual encoder

@dataclass
class DualEncoder:
    vit: VitConfig = field(default_factory=VitConfig)
    text: TextConfig = field(default_factory=TextConfig)
    cpe: CpeConfig | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cpe is None:
            self.cpe = desk_cpe_config(self.vit)

    @classmethod
    def init(cls, vit=None, text=None, cpe=None, seed=0, tau_init=0.07, pe_std=0.1):
        vit = vit or VitConfig()
        text = text or TextConfig()
        rng = np.random.default_rng(seed)
        params = {}

        def put(name, value):
            params[name] = Tensor(value, requires_grad=True, name=name)

        d, g = vit.dim, vit.grid
        pin = vit.patch_size ** 2 * vit.channels
        put("image.patch.w", rng.normal(0.0, 1.0 / np.sqrt(pin), size=(pin, d)))
        put("image.patch.b", np.zeros(d))
        put("image.pe", rng.normal(0.0, pe_std, size=(g, g, d)))
        for i in range(vit.depth):
            _init_block(params, f"image.block{i}", d, vit.mlp_ratio, rng)
        put("image.ln_f.g", np.ones(d))
        put("image.ln_f.b", np.zeros(d))

        td = text.dim
        put("text.tok", rng.normal(0.0, 1.0, size=(text.vocab_size, td)))
        put("text.pe", rng.normal(0.0, pe_std, size=(text.max_len, td)))
        for i in range(text.depth):
            _init_block(params, f"text.block{i}", td, text.mlp_ratio, rng)
        put("text.ln_f.g", np.ones(td))
        put("text.ln_f.b", np.zeros(td))

        put("logit_temp", np.array(np.log(tau_init)))
        return cls(vit=vit, text=text, cpe=cpe, params=params)

    @property
    def tau(self) -> Tensor:
        return ad.exp(self.params["logit_temp"])

    @property
    def eval_pe_mode(self) -> str:
        """PE handling at inference: crop-based training modes use the full grid."""
        return "learnable" if self.vit.pe_mode in ("cpe", "feat_crop_resize") else self.vit.pe_mode

    def group_of(self, name: str) -> str:
        if name.startswith("image."):
            return "backbone"
        if name.startswith("text."):
            return "text"
        return "temperature"

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                  for k, v in self.params.items()}
        return DualEncoder(vit=self.vit, text=self.text, cpe=self.cpe, params=params)


def _positional(model: DualEncoder, batch: int, pe_mode: str, rng):
    vit = model.vit
    g, d = vit.grid, vit.dim
    if pe_mode in ("learnable", "feat_crop_resize"):
        return model.params["image.pe"].reshape(g * g, d)
    if pe_mode == "cpe":
        if rng is None:
            raise ContractError("pe_mode='cpe' needs an rng to sample crop regions")
        cpe = model.cpe
        if cpe.out_size != g:
            raise DimensionError(f"CPE out_size {cpe.out_size} does not match the {g}x{g} patch grid")
        regions = [sample_crop_region(rng, cpe) for _ in range(batch)]
        return batched_cpe(model.params["image.pe"], cpe, regions).reshape(batch, g * g, d)
    if pe_mode == "sincos":
        return sincos_pe(g, g, d).values.reshape(g * g, d)
    if pe_mode == "none":
        return None
    raise ValueError(f"unknown pe_mode {pe_mode!r}")


def image_features(model: DualEncoder, images, pe_mode=None, rng=None) -> Tensor:
    """Final-layer patch features, (B, g, g, D) for a batch of (B, H, W, C) images."""
    vit = model.vit
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (vit.image_size, vit.image_size, vit.channels):
        raise DimensionError(f"images must be (B, {vit.image_size}, {vit.image_size}, {vit.channels})")
    pe_mode = pe_mode or vit.pe_mode
    P = model.params
    b = images.shape[0]
    pixels = (images - vit.pixel_mean) / vit.pixel_std
    x = ad.as_tensor(patchify(pixels, vit.patch_size)) @ P["image.patch.w"] + P["image.patch.b"]
    pos = _positional(model, b, pe_mode, rng)
    if pos is not None:
        x = x + pos
    for i in range(vit.depth):
        x = attention_block(x, _sub(P, f"image.block{i}"), vit.heads)
    x = ad.layer_norm(x, P["image.ln_f.g"], P["image.ln_f.b"])
    g = vit.grid
    return x.reshape(b, g, g, vit.dim)


def image_forward(model: DualEncoder, images, pe_mode=None, rng=None) -> Tensor:
    """Unit-norm image embeddings, (B, D).

    ``feat_crop_resize`` applies a sampled crop-and-resize to the final
    feature map before pooling, using the same region sampler as CPE.
    """
    pe_mode = pe_mode or model.vit.pe_mode
    feats = image_features(model, images, pe_mode, rng)
    b, g, _, d = feats.shape
    if pe_mode == "feat_crop_resize":
        if rng is None:
            raise ContractError("pe_mode='feat_crop_resize' needs an rng")
        coords = [crop_coordinates(sample_crop_region(rng, model.cpe), g, g) for _ in range(b)]
        ys = np.stack([c[0] for c in coords])
        xs = np.stack([c[1] for c in coords])
        feats = ad.bilinear_sample(feats, ys, xs)
    pooled = feats.reshape(b, g * g, d).mean(axis=1)
    return ad.l2_normalize(pooled)


def pad_tokens(tokens, vocab_size: int, max_len: int):
    """Pad id sequences to a common length; returns (ids, mask) arrays."""
    if len(tokens) == 0:
        raise ValueError("empty token batch")
    seqs = [list(map(int, t)) for t in tokens]
    n = max(len(s) for s in seqs)
    if n > max_len:
        raise ValueError(f"token sequence longer than max_len={max_len}")
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        if not s:
            raise ValueError("token sequences must be non-empty")
        for t in s:
            if not 0 <= t < vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def text_forward(model: DualEncoder, tokens) -> Tensor:
    """Unit-norm text embeddings, (B, D), masked-mean pooled over real tokens.

    ``tokens`` is a sequence of id sequences (a single flat sequence is
    treated as a batch of one).
    """
    cfg = model.text
    if len(tokens) and np.ndim(tokens[0]) == 0:
        tokens = [tokens]
    ids, mask = pad_tokens(tokens, cfg.vocab_size, cfg.max_len)
    P = model.params
    b, n = ids.shape
    x = ad.embedding(P["text.tok"], ids) + ad.embedding(P["text.pe"], np.arange(n))
    key_bias = ((mask - 1.0) * 1e9)[:, None, None, :]
    for i in range(cfg.depth):
        x = attention_block(x, _sub(P, f"text.block{i}"), cfg.heads, key_bias)
    x = ad.layer_norm(x, P["text.ln_f.g"], P["text.ln_f.b"])
    pooled = (x * mask[:, :, None]).sum(axis=1) * (1.0 / mask.sum(axis=1, keepdims=True))
    return ad.l2_normalize(pooled)


# ---------------------------------------------------------------- checkpoints

def _config_records(model: DualEncoder):
    out = []
    for section, cfg in (("vit", model.vit), ("text", model.text), ("cpe", model.cpe)):
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if f.name == "pe_mode":
                value = PE_MODES.index(value)
            arr = np.asarray(value, dtype=np.float64)
            out.append((f"config.{section}.{f.name}", arr))
    return out


def save_checkpoint(model: DualEncoder, path) -> None:
    """Write ``ROVT`` magic, u32 version, then one record per array.

    Record: u32 name length, utf-8 name, u32 rank, u32 dims, f64 payload.
    All little-endian.  Model hyper-parameters are stored as ``config.*``
    records ahead of the parameters.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        records = _config_records(model) + [(k, v.data) for k, v in model.params.items()]
        for name, arr in records:
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_records(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def _config_from(records, section, cls):
    kwargs = {}
    for f in fields(cls):
        key = f"config.{section}.{f.name}"
        if key not in records:
            continue
        v = records[key]
        if f.name == "pe_mode":
            kwargs[f.name] = PE_MODES[int(v)]
        elif v.ndim:
            kwargs[f.name] = tuple(float(x) for x in v)
        elif f.type in ("int", int):
            kwargs[f.name] = int(v)
        else:
            kwargs[f.name] = float(v)
    return cls(**kwargs)


def load_checkpoint(path) -> DualEncoder:
    records = read_records(path)
    vit = _config_from(records, "vit", VitConfig)
    text = _config_from(records, "text", TextConfig)
    cpe = _config_from(records, "cpe", CpeConfig)
    params = {k: Tensor(v, requires_grad=True, name=k)
              for k, v in records.items() if not k.startswith("config.")}
    return DualEncoder(vit=vit, text=text, cpe=cpe, params=params)
