"""Trainable networks: prior/posterior latent encoders, the audio-visual
feature pyramid that stands in for TPAVI, the mask decoder and the MI critic."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .experts import ExpertSet
from .factorization import expand_to_map
from .gaussian import DiagGaussian, gaussian
from .mi import VariationalConditional
from .nn import Conv2d, Linear
from .rng import make_rng


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 16
    factorized: bool = True
    use_audio: bool = True
    latent_kind: str = "vae"                 # "vae" or "ae"
    divergence: str = "JS"                   # selects joint head (KL) or modality experts
    conv_channels: tuple[int, ...] = (8, 8, 16, 16, 16)
    fc_width: int = 32
    feat_channels: tuple[int, ...] = (8, 8, 16, 16)   # at 1, 1/2, 1/4, 1/8 resolution
    audio_embed: int = 16
    dec_channels: tuple[int, ...] = (16, 16, 8, 8)     # at 1/8, 1/4, 1/2, 1
    sigma_tile: float = 0.1
    shared_decoder: bool = True
    shared_critic: bool = True
    frame_size: int = 32
    audio_dim: int = 16
    init_seed: int = 0

    def __post_init__(self):
        if self.latent_kind not in ("vae", "ae"):
            raise ValueError("latent_kind must be 'vae' or 'ae'")
        if self.divergence not in ("KL", "PoE", "MoE", "JS"):
            raise ValueError(f"unknown divergence {self.divergence!r}")
        if len(self.conv_channels) != 5:
            raise ValueError("the visual latent encoder has exactly five conv stages")
        if self.frame_size % 32:
            raise ValueError("frame_size must be a multiple of 32")
        if len(self.feat_channels) != 4 or len(self.dec_channels) != 4:
            raise ValueError("feature pyramid and decoder have four levels")

    @property
    def code_dim(self) -> int:
        """Channels of the code fed to the decoder."""
        return 2 * self.latent_dim if self.factorized else self.latent_dim

    @property
    def joint_head(self) -> bool:
        return self.divergence == "KL" or not self.use_audio

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class Batch:
    frames: np.ndarray    # (B, T, 1, H, W)
    audio: np.ndarray     # (B, T, d_a)
    target: np.ndarray    # (B, T, 1, H, W) training targets / posterior input
    masks: np.ndarray = field(default=None)  # true masks, for evaluation

    @property
    def B(self) -> int:
        return self.frames.shape[0]

    @property
    def T(self) -> int:
        return self.frames.shape[1]


def make_batch(clips, protocol: str = "MS3") -> Batch:
    from .synth import s4_label_mask

    frames = np.stack([c.frames for c in clips])
    audio = np.stack([c.audio for c in clips])
    target = np.stack([s4_label_mask(c, protocol) for c in clips])
    masks = np.stack([c.masks for c in clips])
    return Batch(frames, audio, target, masks)


def _split_stats(x: Tensor, lat: int, lead: tuple[int, ...]) -> DiagGaussian:
    mu, lv = ad.split(x, [lat, lat], axis=-1)
    return gaussian(ad.reshape(mu, lead + (lat,)), ad.reshape(lv, lead + (lat,)))


class VisualStack:
    """Five stride-2 3x3 convs with leaky-ReLU; returns flattened features."""

    def __init__(self, store, name, cin, channels, rng):
        self.convs = []
        prev = cin
        for i, ch in enumerate(channels):
            self.convs.append(Conv2d(store, f"{name}.conv{i}", prev, ch, 3, rng, stride=2))
            prev = ch

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ad.leaky_relu(conv(x))
        n = x.shape[0]
        return ad.reshape(x, (n, -1))


class Head:
    """FC -> leaky -> FC emitting (mu, logvar)."""

    def __init__(self, store, name, din, width, lat, rng):
        self.fc1 = Linear(store, f"{name}.fc1", din, width, rng)
        self.fc2 = Linear(store, f"{name}.fc2", width, 2 * lat, rng)

    def __call__(self, x):
        return self.fc2(ad.leaky_relu(self.fc1(x)))


class LatentEncoder:
    """One prior or posterior encoder for a single code.

    kind: 'visual' (s_v), 'audio' (s_a) or 'joint' (c, late fusion). Posterior
    encoders see y: concatenated to the frames, and pooled to a 4x4 summary
    for the audio branch.
    """

    def __init__(self, store, name, kind: str, posterior: bool, cfg: ModelConfig, rng,
                 joint_head: bool = True, modal_heads: bool = False):
        self.kind, self.posterior, self.cfg = kind, posterior, cfg
        lat, width = cfg.latent_dim, cfg.fc_width
        sp = cfg.frame_size // 32
        vis_dim = cfg.conv_channels[-1] * sp * sp
        self.visual = self.audio = None
        if kind in ("visual", "joint"):
            self.visual = VisualStack(store, f"{name}.vis", 2 if posterior else 1, cfg.conv_channels, rng)
        use_audio = kind == "audio" or (kind == "joint" and cfg.use_audio)
        if use_audio:
            din = cfg.audio_dim + (16 if posterior else 0)
            self.audio = Linear(store, f"{name}.aud", din, width, rng)
        feat_dim = (vis_dim if self.visual else 0) + (width if self.audio else 0)
        self.head = self.head_v = self.head_a = None
        if kind == "visual":
            self.head = Head(store, f"{name}.head", vis_dim, width, lat, rng)
        elif kind == "audio":
            self.head = Linear(store, f"{name}.head", width, 2 * lat, rng)
        else:
            if joint_head:
                self.head = Head(store, f"{name}.head", feat_dim, width, lat, rng)
            if modal_heads:
                self.head_v = Head(store, f"{name}.head_v", vis_dim, width, lat, rng)
                if self.audio is not None:
                    self.head_a = Linear(store, f"{name}.head_a", width, 2 * lat, rng)

    def __call__(self, frames: np.ndarray, audio: np.ndarray, y: np.ndarray | None):
        B, T = frames.shape[:2]
        lead = (B, T)
        lat = self.cfg.latent_dim
        hv = ha = None
        if self.visual is not None:
            x = frames.reshape((B * T,) + frames.shape[2:])
            if self.posterior:
                x = np.concatenate([x, y.reshape(x.shape)], axis=1)
            hv = self.visual(Tensor(x))
        if self.audio is not None:
            a = audio.reshape(B * T, -1)
            if self.posterior:
                k = y.shape[-1] // 4
                pooled = y.reshape(B * T, 4, k, 4, k).mean(axis=(2, 4)).reshape(B * T, 16)
                a = np.concatenate([a, pooled], axis=1)
            ha = ad.leaky_relu(self.audio(Tensor(a)))
        if self.kind == "visual":
            return _split_stats(self.head(hv), lat, lead)
        if self.kind == "audio":
            return _split_stats(self.head(ha), lat, lead)
        out = {}
        if self.head is not None:
            feats = hv if ha is None else ad.concat([hv, ha], axis=1)
            out["joint"] = _split_stats(self.head(feats), lat, lead)
        if self.head_v is not None:
            experts = [_split_stats(self.head_v(hv), lat, lead)]
            if self.head_a is not None:
                experts.append(_split_stats(self.head_a(ha), lat, lead))
            out["experts"] = ExpertSet(experts)
        return out


class FeaturePyramid:
    """Deterministic frame features; with audio, each level is fused with a
    broadcast audio embedding (concatenate, 1x1 conv, leaky-ReLU)."""

    def __init__(self, store, name, cfg: ModelConfig, rng):
        ch = cfg.feat_channels
        self.convs = [Conv2d(store, f"{name}.conv0", 1, ch[0], 3, rng, stride=1)]
        for i in range(1, 4):
            self.convs.append(Conv2d(store, f"{name}.conv{i}", ch[i - 1], ch[i], 3, rng, stride=2))
        self.audio = None
        if cfg.use_audio:
            self.audio = Linear(store, f"{name}.aud", cfg.audio_dim, cfg.audio_embed, rng)
            self.fuse = [Conv2d(store, f"{name}.fuse{i}", ch[i] + cfg.audio_embed, ch[i], 1, rng)
                         for i in range(4)]

    def __call__(self, frames: np.ndarray, audio: np.ndarray) -> list[Tensor]:
        B, T = frames.shape[:2]
        x = Tensor(frames.reshape((B * T,) + frames.shape[2:]))
        feats = []
        for conv in self.convs:
            x = ad.leaky_relu(conv(x))
            feats.append(x)
        if self.audio is None:
            return feats
        emb = ad.leaky_relu(self.audio(Tensor(audio.reshape(B * T, -1))))
        n, e = emb.shape
        emb4 = ad.reshape(emb, (n, e, 1, 1))
        fused = []
        for f, fz in zip(feats, self.fuse):
            a = ad.broadcast_to(emb4, (n, e) + f.shape[2:])
            fused.append(ad.leaky_relu(fz(ad.concat([f, a], axis=1))))
        return fused


FG_PRIOR_LOGIT = math.log(0.1 / 0.9)


class _SplitConv:
    """conv(concat([x, skip])) written as conv_x(x) + conv_s(skip).

    x carries P stacked paths of N frames while skip is shared, so the skip
    half runs once per frame instead of once per path.
    """

    def __init__(self, store, name, cin_x, cin_s, cout, rng, kx: int = 3):
        fan = cin_x * kx * kx + cin_s * 9
        self.x = Conv2d(store, f"{name}", cin_x, cout, kx, rng, fan_in=fan)
        self.s = Conv2d(store, f"{name}.skip", cin_s, cout, 3, rng, bias=False, fan_in=fan)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        n = skip.shape[0]
        p = x.shape[0] // n
        hx = self.x(x)
        hs = self.s(skip)
        out = ad.reshape(hx, (p, n) + hx.shape[1:]) + ad.reshape(hs, (1,) + hs.shape)
        return ad.reshape(out, hx.shape)


class Decoder:
    """Expanded latent map enters at 1/8 resolution; three 2x upsampling stages
    with skip features from the pyramid produce per-pixel logits."""

    def __init__(self, store, name, cfg: ModelConfig, rng):
        fc, dc = cfg.feat_channels, cfg.dec_channels
        self.cfg = cfg
        self.c3 = _SplitConv(store, f"{name}.c3", cfg.code_dim, fc[3], dc[0], rng)
        self.c2 = _SplitConv(store, f"{name}.c2", dc[0], fc[2], dc[1], rng)
        self.c1 = _SplitConv(store, f"{name}.c1", dc[1], fc[1], dc[2], rng)
        # full resolution: pointwise on the per-path stream, 3x3 on the shared skip
        self.c0 = _SplitConv(store, f"{name}.c0", dc[2], fc[0], dc[3], rng, kx=1)
        self.out = Conv2d(store, f"{name}.out", dc[3], 1, 1, rng)
        # start from a background-heavy prior so an untrained model predicts empty masks
        self.out.b.data[:] = FG_PRIOR_LOGIT

    def __call__(self, feats: list[Tensor], sc: Tensor, rng, noise=None) -> Tensor:
        """feats: pyramid for N frames; sc: (P*N, code_dim) for P stacked paths."""
        n = feats[0].shape[0]
        if sc.shape[0] % n:
            raise ValueError(f"code rows {sc.shape[0]} not a multiple of {n} frames")
        h4 = feats[3].shape[2]
        z = expand_to_map(sc, h4, h4, rng, sigma=self.cfg.sigma_tile, noise=noise)
        x = ad.leaky_relu(self.c3(z, feats[3]))
        x = ad.leaky_relu(self.c2(ad.upsample2x(x), feats[2]))
        x = ad.leaky_relu(self.c1(ad.upsample2x(x), feats[1]))
        x = ad.leaky_relu(self.c0(ad.upsample2x(x), feats[0]))
        return self.out(x)


class ToyModel:
    """All networks of one run, registered in a single ParamStore."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.store = ParamStore()
        rng = make_rng(cfg.init_seed, 7)
        s = self.store
        modal = cfg.divergence != "KL"
        stochastic = cfg.latent_kind == "vae"
        roles = ("prior", "post") if stochastic else ("prior",)
        self.enc: dict[str, dict[str, LatentEncoder]] = {}
        for role in roles:
            post = role == "post"
            encs = {"c": LatentEncoder(s, f"{role}.c", "joint", post, cfg, rng,
                                       joint_head=cfg.joint_head, modal_heads=modal and cfg.use_audio)}
            if cfg.factorized:
                encs["s_v"] = LatentEncoder(s, f"{role}.s_v", "visual", post, cfg, rng)
                if cfg.use_audio:
                    encs["s_a"] = LatentEncoder(s, f"{role}.s_a", "audio", post, cfg, rng)
            self.enc[role] = encs
        self.features = FeaturePyramid(s, "feat", cfg, rng)
        self.decoder = Decoder(s, "dec", cfg, rng)
        self.decoder_v = self.decoder if cfg.shared_decoder else Decoder(s, "dec_v", cfg, rng)
        self.critic = self.critic_pr = None
        if cfg.factorized and cfg.use_audio:
            self.critic = VariationalConditional(s, "mi", 2 * cfg.latent_dim, rng)
            self.critic_pr = self.critic if cfg.shared_critic else VariationalConditional(
                s, "mi_pr", 2 * cfg.latent_dim, rng)

    # ------------------------------------------------------------ encoders
    def _encode(self, role: str, frames, audio, y) -> dict:
        out = {}
        for name, enc in self.enc[role].items():
            d = enc(frames, audio, y)
            if name == "c":
                d = d["joint"] if "joint" in d else d["experts"]
            out[name] = d
        return out

    def encode_priors(self, frames: np.ndarray, audio: np.ndarray) -> dict:
        """Distributions for c (and s_a, s_v when factorised) from x only."""
        return self._encode("prior", frames, audio, None)

    def encode_posteriors(self, frames: np.ndarray, audio: np.ndarray, y: np.ndarray) -> dict:
        if "post" not in self.enc:
            raise RuntimeError("an AE model has no posterior encoders")
        if y.shape != frames.shape:
            raise ValueError(f"y shape {y.shape} must match frames {frames.shape}")
        return self._encode("post", frames, audio, y)

    # ------------------------------------------------------------ decoding
    def decode(self, feats: list[Tensor], sc: Tensor, rng, decoder=None) -> Tensor:
        """sc: (P, B, T, code_dim) or (B, T, code_dim); logits (P*B*T, 1, H, W)."""
        dec = decoder if decoder is not None else self.decoder
        flat = ad.reshape(sc, (-1, sc.shape[-1]))
        return dec(feats, flat, rng)

    def num_params(self) -> int:
        return self.store.num_scalars()
