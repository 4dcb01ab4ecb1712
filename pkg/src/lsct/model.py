"""Encoder, decoder and the assembled latent-constrained transformer.

Data path for a batch of raw PPG segments ``(b, N)``::

    normalise -> STFT -> per-feature z-score -> encoder -> z_q
    z_q -> CAM | NN-VQ -> z_v -> [MSEK] -> z_g
    decoder(z_g + z_q) -> de-normalise -> u_hat -> ISTFT -> x_hat

The loss is computed in dataset-normalised ABP units; :meth:`LSCT.predict`
maps back to the units of the input files.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .msek import ChannelGraph, MsekParams, build_graph, msek_forward
from .quantize import cam_attend, init_codebook, nn_quantize
from .signal import StftConfig, istft_tensor, stft_matrix

__all__ = ["MODES", "ModelConfig", "Normalizer", "ForwardResult", "LSCT", "loss", "loss_terms",
           "closed_form_param_count", "save_checkpoint", "load_checkpoint", "read_checkpoint_header",
           "CheckpointError"]

MODES = ("cam+msek", "cam", "msek", "nn-vq")
CKPT_MAGIC = b"LSCTCKP1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64)
    attn_heads: int = 2
    mlp_ratio: int = 2
    codebook_size: int = 128
    msek_heads: int = 8
    window_len: int = 64
    hop: int = 16
    n_samples: int = 1024
    mode: str = "cam+msek"
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        errors = self.violations()
        if errors:
            raise ValueError("invalid model config: " + "; ".join(errors))

    def violations(self) -> list[str]:
        out = []
        chans = self.encoder_channels
        if len(chans) < 1:
            out.append("encoder_channels must be non-empty")
            return out
        if min(chans) < 1:
            out.append(f"encoder_channels must be positive, got {list(chans)}")
        for c in chans:
            if c % self.attn_heads:
                out.append(f"channel count {c} not divisible by attn_heads {self.attn_heads}")
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.codebook_size < 1 or self.msek_heads < 1 or self.mlp_ratio < 1:
            out.append("codebook_size, msek_heads and mlp_ratio must be positive")
        try:
            stft_cfg = self.stft
        except ValueError as exc:
            out.append(str(exc))
            return out
        if stft_cfg.frames % (2 ** (len(chans) - 1)):
            out.append(f"{stft_cfg.frames} frames not divisible by 2^{len(chans) - 1}")
        return out

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop, True, self.n_samples)

    @property
    def stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def frames(self) -> int:
        return self.stft.frames

    @property
    def bins(self) -> int:
        return self.stft.bins

    @property
    def dim(self) -> int:
        return self.encoder_channels[-1]

    @property
    def bottleneck(self) -> int:
        return self.frames // 2 ** (self.stages - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class Normalizer:
    """Dataset statistics; all zero-mean / unit-scale by default."""

    ppg_mean: float = 0.0
    ppg_std: float = 1.0
    abp_mean: float = 0.0
    abp_std: float = 1.0
    in_mean: np.ndarray | None = None
    in_std: np.ndarray | None = None
    out_mean: np.ndarray | None = None
    out_std: np.ndarray | None = None

    def resolved(self, width: int) -> "Normalizer":
        return Normalizer(
            self.ppg_mean, self.ppg_std, self.abp_mean, self.abp_std,
            np.zeros(width) if self.in_mean is None else np.asarray(self.in_mean, float),
            np.ones(width) if self.in_std is None else np.asarray(self.in_std, float),
            np.zeros(width) if self.out_mean is None else np.asarray(self.out_mean, float),
            np.ones(width) if self.out_std is None else np.asarray(self.out_std, float),
        )

    @classmethod
    def fit(cls, ppg: np.ndarray, abp: np.ndarray, cfg: StftConfig) -> "Normalizer":
        """Scalar z-score of each waveform, then per-feature statistics of their spectra."""
        pm, ps = float(ppg.mean()), float(ppg.std())
        am, as_ = float(abp.mean()), float(abp.std())
        ps, as_ = ps or 1.0, as_ or 1.0
        A = stft_matrix(cfg)
        width = 2 * cfg.bins
        up = (((ppg - pm) / ps) @ A).reshape(-1, width)
        ua = (((abp - am) / as_) @ A).reshape(-1, width)
        in_std = up.std(axis=0)
        in_std = np.where(in_std > 1e-8 * max(in_std.max(), 1e-300), in_std, 1.0)
        out_std = ua.std(axis=0)
        # constant-zero planes (imag DC / Nyquist) keep std 0: output pinned at the mean
        out_std = np.where(out_std > 1e-8 * max(out_std.max(), 1e-300), out_std, 0.0)
        return cls(pm, ps, am, as_, up.mean(axis=0), in_std, ua.mean(axis=0), out_std)


@dataclass
class ForwardResult:
    u_hat: T.Tensor
    x_hat: T.Tensor
    z_q: T.Tensor
    z_v: T.Tensor
    z_g: T.Tensor
    dec_in: T.Tensor
    aux: T.Tensor | None = None
    indices: np.ndarray | None = None


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _block_shapes(prefix: str, c: int, r: int):
    return [
        (f"{prefix}.ln1.g", (c,)), (f"{prefix}.ln1.b", (c,)),
        (f"{prefix}.attn.qkv.w", (c, 3 * c)), (f"{prefix}.attn.qkv.b", (3 * c,)),
        (f"{prefix}.attn.proj.w", (c, c)), (f"{prefix}.attn.proj.b", (c,)),
        (f"{prefix}.ln2.g", (c,)), (f"{prefix}.ln2.b", (c,)),
        (f"{prefix}.mlp.fc1.w", (c, r * c)), (f"{prefix}.mlp.fc1.b", (r * c,)),
        (f"{prefix}.mlp.fc2.w", (r * c, c)), (f"{prefix}.mlp.fc2.b", (c,)),
    ]


def _param_shapes(cfg: ModelConfig):
    """Ordered (name, shape) list; this order is the checkpoint block order."""
    chans, r = cfg.encoder_channels, cfg.mlp_ratio
    width = 2 * cfg.bins
    shapes = [("enc.embed.w", (width, chans[0])), ("enc.embed.b", (chans[0],)),
              ("enc.pos", (cfg.frames, chans[0]))]
    for s, c in enumerate(chans):
        shapes += _block_shapes(f"enc.s{s}", c, r)
        if s < len(chans) - 1:
            nxt = chans[s + 1]
            shapes += [(f"enc.merge{s}.w", (2 * c, nxt)), (f"enc.merge{s}.b", (nxt,))]
    shapes += [("enc.norm.g", (cfg.dim,)), ("enc.norm.b", (cfg.dim,))]
    shapes += [("codebook", (cfg.codebook_size, cfg.dim)),
               ("msek.W", (cfg.msek_heads, cfg.bottleneck, cfg.bottleneck))]
    dec = chans[::-1]
    for s, c in enumerate(dec):
        shapes += _block_shapes(f"dec.s{s}", c, r)
        if s < len(dec) - 1:
            # kernel-2 / stride-2 transposed conv: (c_in, 2 taps * c_out) plus per-channel bias
            nxt = dec[s + 1]
            shapes += [(f"dec.up{s}.w", (c, 2 * nxt)), (f"dec.up{s}.b", (nxt,))]
    shapes += [("dec.norm.g", (dec[-1],)), ("dec.norm.b", (dec[-1],)),
               ("dec.head.w", (dec[-1], width)), ("dec.head.b", (width,))]
    return shapes


def closed_form_param_count(cfg: ModelConfig) -> int:
    """Trainable scalar count as a formula of the config.

    Per transformer block of width c with MLP ratio r: (4 + 2r)c^2 + (9 + r)c.
    """
    r, F, B2 = cfg.mlp_ratio, cfg.frames, 2 * cfg.bins
    chans = cfg.encoder_channels
    c0, d, n = chans[0], cfg.dim, cfg.bottleneck
    block = sum((4 + 2 * r) * c * c + (9 + r) * c for c in chans)
    pairs = list(zip(chans, chans[1:]))
    merges = sum(2 * a * b + b for a, b in pairs)
    ups = sum(2 * a * b + a for a, b in pairs)
    enc = B2 * c0 + c0 + F * c0 + block + merges + 2 * d
    dec = block + ups + 2 * c0 + c0 * B2 + B2
    return enc + dec + cfg.codebook_size * d + cfg.msek_heads * n * n


class LSCT:
    """Parameters plus forward pass for one model configuration."""

    def __init__(self, cfg: ModelConfig, normalizer: Normalizer | None = None,
                 params: "OrderedDict[str, T.Tensor] | None" = None,
                 graph: ChannelGraph | None = None):
        self.cfg = cfg
        self.stft_cfg = cfg.stft
        self.norm = (normalizer or Normalizer()).resolved(2 * cfg.bins)
        self.params = params if params is not None else self._init_params()
        self.graph = graph if graph is not None else build_graph(cfg.dim, cfg.seed + 1)
        self._A = T.Tensor(stft_matrix(self.stft_cfg))

    def _init_params(self) -> "OrderedDict[str, T.Tensor]":
        rng = np.random.default_rng(self.cfg.seed)
        out: OrderedDict[str, T.Tensor] = OrderedDict()
        for name, shape in _param_shapes(self.cfg):
            if name == "codebook":
                out[name] = init_codebook(*shape, seed=int(rng.integers(2**31)))
                continue
            if name.endswith(".g"):
                data = np.ones(shape)
            elif name.endswith(".b"):
                data = np.zeros(shape)
            elif name == "enc.pos":
                data = rng.uniform(-0.02, 0.02, size=shape)
            elif name == "msek.W":
                data = _uniform(rng, shape, shape[-1])
            else:
                data = _uniform(rng, shape, shape[0])
            out[name] = T.Tensor(data, requires_grad=True, name=name)
        return out

    # -- bookkeeping -------------------------------------------------------

    @property
    def msek_params(self) -> MsekParams:
        return MsekParams(self.params["msek.W"])

    def parameters(self):
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks ---------------------------------------------------

    def _ln(self, x, prefix):
        return T.layer_norm_lastdim(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _lin(self, x, prefix):
        return T.linear(x, self.params[prefix + ".w"], self.params[prefix + ".b"])

    def _attention(self, x, prefix):
        b, L, c = x.shape
        H = self.cfg.attn_heads
        dh = c // H
        qkv = self._lin(x, prefix + ".qkv")
        qkv = T.permute(T.reshape(qkv, (b, L, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = (T.reshape(t, (b, H, L, dh)) for t in T.split(qkv, [1, 1, 1], axis=0))
        att = T.softmax_lastdim(T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(dh)))
        o = T.reshape(T.permute(T.matmul(att, v), (0, 2, 1, 3)), (b, L, c))
        return self._lin(o, prefix + ".proj")

    def _block(self, x, prefix):
        x = T.add(x, self._attention(self._ln(x, prefix + ".ln1"), prefix + ".attn"))
        h = T.gelu(self._lin(self._ln(x, prefix + ".ln2"), prefix + ".mlp.fc1"))
        return T.add(x, self._lin(h, prefix + ".mlp.fc2"))

    # -- encoder / decoder -------------------------------------------------

    def encode(self, feats: T.Tensor) -> T.Tensor:
        """Normalised spectrogram features (b, F, 2B) -> latent code (b, n, d)."""
        cfg = self.cfg
        if feats.shape[1:] != (cfg.frames, 2 * cfg.bins):
            raise ValueError(f"encoder expects (b, {cfg.frames}, {2 * cfg.bins}), got {feats.shape}")
        x = T.add(self._lin(feats, "enc.embed"), self.params["enc.pos"])
        for s, c in enumerate(cfg.encoder_channels):
            x = self._block(x, f"enc.s{s}")
            if s < cfg.stages - 1:
                b, L, _ = x.shape
                x = self._lin(T.reshape(x, (b, L // 2, 2 * c)), f"enc.merge{s}")
        return self._ln(x, "enc.norm")

    def decode(self, z: T.Tensor) -> T.Tensor:
        """Bottleneck (b, n, d) -> normalised spectrogram features (b, F, 2B)."""
        cfg = self.cfg
        if z.shape[1:] != (cfg.bottleneck, cfg.dim):
            raise ValueError(f"decoder expects (b, {cfg.bottleneck}, {cfg.dim}), got {z.shape}")
        x = z
        dec = cfg.encoder_channels[::-1]
        for s, c in enumerate(dec):
            x = self._block(x, f"dec.s{s}")
            if s < len(dec) - 1:
                b, L, _ = x.shape
                y = T.matmul(x, self.params[f"dec.up{s}.w"])
                x = T.add(T.reshape(y, (b, 2 * L, dec[s + 1])), self.params[f"dec.up{s}.b"])
        return self._lin(self._ln(x, "dec.norm"), "dec.head")

    # -- full pass ---------------------------------------------------------

    def input_features(self, ppg: np.ndarray) -> np.ndarray:
        """Raw (possibly masked) PPG (b, N) -> normalised encoder input (b, F, 2B)."""
        ppg = np.atleast_2d(np.asarray(ppg, dtype=np.float64))
        xn = (ppg - self.norm.ppg_mean) / self.norm.ppg_std
        feats = (xn @ self._A.data).reshape(ppg.shape[0], self.cfg.frames, 2 * self.cfg.bins)
        return (feats - self.norm.in_mean) / self.norm.in_std

    def target(self, abp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Raw ABP (b, N) -> (normalised waveform, its spectrogram features)."""
        abp = np.atleast_2d(np.asarray(abp, dtype=np.float64))
        xn = (abp - self.norm.abp_mean) / self.norm.abp_std
        u = (xn @ self._A.data).reshape(abp.shape[0], self.cfg.frames, 2 * self.cfg.bins)
        return xn, u

    def latent(self, z_q: T.Tensor):
        """Return (z_v, z_g, aux, indices) for the configured mode."""
        mode = self.cfg.mode
        M = self.params["codebook"]
        aux = indices = None
        if mode in ("cam+msek", "cam"):
            z_v = cam_attend(z_q, M)
        else:
            z_v, indices, aux = nn_quantize(z_q, M)
        z_g = msek_forward(z_v, self.graph, self.msek_params) if mode in ("cam+msek", "msek") else z_v
        return z_v, z_g, aux, indices

    def forward(self, ppg: np.ndarray) -> ForwardResult:
        feats = T.Tensor(self.input_features(ppg))
        z_q = self.encode(feats)
        z_v, z_g, aux, indices = self.latent(z_q)
        dec_in = T.add(z_g, z_q)
        y = self.decode(dec_in)
        u_hat = T.add(T.mul(y, T.Tensor(self.norm.out_std)), T.Tensor(self.norm.out_mean))
        x_hat = istft_tensor(u_hat, self.stft_cfg)
        return ForwardResult(u_hat, x_hat, z_q, z_v, z_g, dec_in, aux, indices)

    def objective(self, ppg: np.ndarray, abp: np.ndarray) -> T.Tensor:
        """Training loss: time + spectral MSE, plus the VQ auxiliary term when hard-quantising."""
        res = self.forward(ppg)
        xn, u = self.target(abp)
        total = loss(T.Tensor(xn), res.x_hat, T.Tensor(u), res.u_hat)
        return T.add(total, res.aux) if res.aux is not None else total

    def predict(self, ppg: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """ABP waveforms in file units for raw PPG input (b, N)."""
        ppg = np.atleast_2d(np.asarray(ppg, dtype=np.float64))
        out = []
        for i in range(0, ppg.shape[0], batch_size):
            res = self.forward(ppg[i:i + batch_size])
            out.append(res.x_hat.data * self.norm.abp_std + self.norm.abp_mean)
        return np.concatenate(out, axis=0)


def loss_terms(x_a: T.Tensor, x_hat: T.Tensor, u_a: T.Tensor, u_hat: T.Tensor):
    if x_a.shape != x_hat.shape or u_a.shape != u_hat.shape:
        raise ValueError(f"loss: shape mismatch time {x_a.shape} vs {x_hat.shape}, "
                         f"spectral {u_a.shape} vs {u_hat.shape}")
    dt = T.sub(x_a, x_hat)
    du = T.sub(u_a, u_hat)
    return T.mean(T.mul(dt, dt)), T.mean(T.mul(du, du))


def loss(x_a, x_hat, u_a, u_hat) -> T.Tensor:
    """Mean squared error in time plus mean squared error over both spectrogram planes."""
    a, b = loss_terms(*(t if isinstance(t, T.Tensor) else T.Tensor(t) for t in (x_a, x_hat, u_a, u_hat)))
    return T.add(a, b)


# ----------------------------------------------------------------------------
# checkpoint: magic, u64 header length, JSON header, float64 LE blocks
# ----------------------------------------------------------------------------


def _buffers(model: LSCT) -> "OrderedDict[str, np.ndarray]":
    n = model.norm
    return OrderedDict([
        ("norm.scalars", np.array([n.ppg_mean, n.ppg_std, n.abp_mean, n.abp_std])),
        ("norm.in_mean", n.in_mean), ("norm.in_std", n.in_std),
        ("norm.out_mean", n.out_mean), ("norm.out_std", n.out_std),
        ("graph.adjacency", model.graph.adjacency.astype(np.float64)),
    ])


def save_checkpoint(path, model: LSCT, step: int = 0, meta: dict | None = None) -> None:
    blocks = list(model.params.items()) + [(k, v) for k, v in _buffers(model).items()]
    header = {
        "format": 1,
        "config": model.cfg.to_json(),
        "seed": model.cfg.seed,
        "step": int(step),
        "meta": meta or {},
        "blocks": [{"name": k, "shape": list(np.shape(v.data if isinstance(v, T.Tensor) else v))}
                   for k, v in blocks],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for _, v in blocks:
        arr = v.data if isinstance(v, T.Tensor) else np.asarray(v)
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _split_header(raw: bytes, path) -> tuple[dict, int]:
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an LSCT checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    return json.loads(raw[16:16 + hlen].decode()), 16 + hlen


def read_checkpoint_header(path) -> dict:
    return _split_header(Path(path).read_bytes(), path)[0]


def load_checkpoint(path) -> tuple[LSCT, dict]:
    raw = Path(path).read_bytes()
    header, off = _split_header(raw, path)
    cfg = ModelConfig.from_json(header["config"])
    expected = [name for name, _ in _param_shapes(cfg)]
    got = [b["name"] for b in header["blocks"]]
    if got[:len(expected)] != expected:
        raise CheckpointError(f"{path}: parameter layout does not match config")
    arrays = OrderedDict()
    for b in header["blocks"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        arrays[b["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(b["shape"]).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes ({len(raw) - off})")
    params = OrderedDict((k, T.Tensor(arrays[k], requires_grad=True, name=k)) for k in expected)
    s = arrays["norm.scalars"]
    norm = Normalizer(float(s[0]), float(s[1]), float(s[2]), float(s[3]), arrays["norm.in_mean"],
                      arrays["norm.in_std"], arrays["norm.out_mean"], arrays["norm.out_std"])
    graph = ChannelGraph(arrays["graph.adjacency"] > 0.5, cfg.seed + 1)
    return LSCT(cfg, norm, params, graph), header
