"""Desk-scale generative audio models and their losses.

Three architectures, each built as a Network with full trim wiring:

* "wavenet": stacked gated dilated causal convolutions over mu-law
  classes, trained with teacher forcing and sampled autoregressively.
  Trim groups tie the residual stream, each block's filter/gate pair,
  and the skip stream.
* "sing_ae": a convolutional autoencoder (conv + batchnorm + tanh)
  reconstructing the waveform under a multiscale log-spectral loss.
* "ddsp": GRU + dense decoder emitting per-frame controls for a
  differentiable harmonic-plus-filtered-noise synthesiser.

All waveforms live in [-1, 1] at a fixed sample rate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import fourier, nn
from . import tensor as T
from .nn import Network
from .tensor import SpectrogramConfig, Tensor


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    sample_rate: int = 16000
    # wavenet
    n_stacks: int = 2
    blocks_per_stack: int = 8
    residual_channels: int = 16
    gate_channels: int = 32
    skip_channels: int = 32
    head_channels: int = 32
    kernel_size: int = 2
    n_classes: int = 256
    # sing autoencoder
    conv_channels: int = 64
    n_conv_layers: int = 5
    sing_kernel: int = 9
    # ddsp
    gru_units: int = 64
    dense_units: int = 64
    n_partials: int = 32
    noise_bins: int = 65
    frame_hop: int = 200
    noise_seed: int = 0
    # spectral loss
    spec_windows: tuple[int, ...] = (32, 128, 256, 512, 1024)
    spec_hop_fraction: float = 0.25
    spec_epsilon: float = 5e-3

    def spectrogram(self) -> SpectrogramConfig:
        return SpectrogramConfig(tuple(self.spec_windows),
                                 self.spec_hop_fraction, self.spec_epsilon)


def spectrogram_from_meta(meta: dict) -> SpectrogramConfig:
    cfg = meta["config"]
    return SpectrogramConfig(tuple(cfg["spec_windows"]),
                             cfg["spec_hop_fraction"], cfg["spec_epsilon"])


# -- mu-law ----------------------------------------------------------------


@dataclass(frozen=True)
class MuLawCodec:
    """Companding quantiser mapping [-1, 1] onto mu + 1 classes."""

    mu: int = 255

    def compand(self, x: np.ndarray) -> np.ndarray:
        x = np.clip(x, -1.0, 1.0)
        return np.sign(x) * np.log1p(self.mu * np.abs(x)) / np.log1p(self.mu)

    def expand(self, f: np.ndarray) -> np.ndarray:
        return np.sign(f) * ((1.0 + self.mu) ** np.abs(f) - 1.0) / self.mu

    def encode(self, wave: np.ndarray) -> np.ndarray:
        f = self.compand(np.asarray(wave))
        q = ((f + 1.0) * 0.5 * (self.mu + 1)).astype(np.int64)
        return np.minimum(q, self.mu)

    def decode(self, idx: np.ndarray) -> np.ndarray:
        f = (np.asarray(idx) + 0.5) / (self.mu + 1) * 2.0 - 1.0
        return self.expand(f).astype(np.float32)


# -- builders ----------------------------------------------------------------


def build_model(cfg: ModelConfig, seed: int = 0) -> Network:
    builders = {"wavenet": _build_wavenet, "sing_ae": _build_sing,
                "ddsp": _build_ddsp}
    if cfg.arch not in builders:
        raise ValueError(f"unknown arch '{cfg.arch}', expected one of {sorted(builders)}")
    return builders[cfg.arch](cfg, np.random.default_rng(seed))


def wavenet_dilations(cfg: ModelConfig) -> list[int]:
    return [2 ** i for _ in range(cfg.n_stacks) for i in range(cfg.blocks_per_stack)]


def receptive_field(cfg: ModelConfig) -> int:
    return sum(d * (cfg.kernel_size - 1) for d in wavenet_dilations(cfg)) + cfg.kernel_size


def _build_wavenet(cfg: ModelConfig, rng) -> Network:
    dil = wavenet_dilations(cfg)
    layers = [nn.make_conv("in_conv", 1, cfg.residual_channels, cfg.kernel_size, rng)]
    res_group = ["in_conv"]
    skip_group = []
    groups = []
    for i, d in enumerate(dil):
        layers.append(nn.make_conv(f"filter_{i}", cfg.residual_channels,
                                   cfg.gate_channels, cfg.kernel_size, rng,
                                   dilation=d, in_source="in_conv"))
        layers.append(nn.make_conv(f"gate_{i}", cfg.residual_channels,
                                   cfg.gate_channels, cfg.kernel_size, rng,
                                   dilation=d, in_source="in_conv"))
        layers.append(nn.make_conv(f"skip_{i}", cfg.gate_channels,
                                   cfg.skip_channels, 1, rng, in_source=f"filter_{i}"))
        if i < len(dil) - 1:
            # the last block's residual output feeds nothing, so the
            # projection is never built
            layers.append(nn.make_conv(f"res_{i}", cfg.gate_channels,
                                       cfg.residual_channels, 1, rng,
                                       in_source=f"filter_{i}"))
            res_group.append(f"res_{i}")
        groups.append([f"filter_{i}", f"gate_{i}"])
        skip_group.append(f"skip_{i}")
    layers.append(nn.make_conv("out1", cfg.skip_channels, cfg.head_channels, 1, rng,
                               in_source=skip_group[0]))
    layers.append(nn.make_conv("out2", cfg.head_channels, cfg.n_classes, 1, rng,
                               in_source="out1"))
    groups.append(res_group)
    groups.append(skip_group)
    meta = {"config": asdict(cfg), "dilations": dil}
    return Network("wavenet", layers, trim_groups=groups,
                   protected={"out2"}, meta=meta)


def _forward_wavenet(net: Network, x: Tensor) -> Tensor:
    """x: (batch, 1, time) waveform; returns (batch, classes, time) logits."""
    n_blocks = len(net.meta["dilations"])
    r = nn.conv_forward(net.layers["in_conv"], x)
    nn.record("in_conv", r, -2)
    skip_total = None
    for i in range(n_blocks):
        f = T.tanh(nn.conv_forward(net.layers[f"filter_{i}"], r))
        g = T.sigmoid(nn.conv_forward(net.layers[f"gate_{i}"], r))
        z = T.mul(f, g)
        # the gated product is the pair's unit activation
        nn.record(f"filter_{i}", z, -2)
        nn.record(f"gate_{i}", z, -2)
        s = nn.conv_forward(net.layers[f"skip_{i}"], z)
        nn.record(f"skip_{i}", s, -2)
        skip_total = s if skip_total is None else T.add(skip_total, s)
        if i < n_blocks - 1:
            r = T.add(r, nn.conv_forward(net.layers[f"res_{i}"], z))
            nn.record(f"res_{i}", r, -2)
    h = T.relu(skip_total)
    h = T.relu(nn.conv_forward(net.layers["out1"], h))
    nn.record("out1", h, -2)
    out = nn.conv_forward(net.layers["out2"], h)
    nn.record("out2", out, -2)
    return out


def _build_sing(cfg: ModelConfig, rng) -> Network:
    if cfg.n_conv_layers < 2:
        raise ValueError("autoencoder needs at least two conv layers")
    layers = []
    groups = []
    prev = None
    for i in range(cfg.n_conv_layers - 1):
        n_in = 1 if i == 0 else cfg.conv_channels
        cname, bname = f"conv{i}", f"bn{i}"
        layers.append(nn.make_conv(cname, n_in, cfg.conv_channels,
                                   cfg.sing_kernel, rng, in_source=prev))
        layers.append(nn.make_batchnorm(bname, cfg.conv_channels, in_source=cname))
        groups.append([cname, bname])
        prev = cname
    layers.append(nn.make_conv("out", cfg.conv_channels, 1, cfg.sing_kernel,
                               rng, in_source=prev))
    meta = {"config": asdict(cfg)}
    return Network("sing_ae", layers, trim_groups=groups,
                   protected={"out"}, meta=meta)


def _forward_sing(net: Network, x: Tensor) -> Tensor:
    """x: (batch, 1, time); returns (batch, 1, time) in [-1, 1]."""
    n = net.meta["config"]["n_conv_layers"]
    for i in range(n - 1):
        x = nn.conv_forward(net.layers[f"conv{i}"], x)
        x = nn.batchnorm_forward(net.layers[f"bn{i}"], x, net.training)
        x = T.tanh(x)
        nn.record(f"conv{i}", x, -2)
    out = T.tanh(nn.conv_forward(net.layers["out"], x))
    nn.record("out", out, -2)
    return out


def _build_ddsp(cfg: ModelConfig, rng) -> Network:
    layers = [
        nn.make_gru("gru", 2, cfg.gru_units, rng),
        nn.make_linear("dense0", cfg.gru_units, cfg.dense_units, rng, in_source="gru"),
        nn.make_linear("dense1", cfg.dense_units, cfg.dense_units, rng, in_source="dense0"),
        nn.make_linear("amp_head", cfg.dense_units, 1, rng, in_source="dense1"),
        nn.make_linear("harm_head", cfg.dense_units, cfg.n_partials, rng, in_source="dense1"),
        nn.make_linear("noise_head", cfg.dense_units, cfg.noise_bins, rng, in_source="dense1"),
    ]
    meta = {"config": asdict(cfg)}
    return Network("ddsp", layers, protected={"amp_head", "harm_head", "noise_head"},
                   meta=meta)


def _forward_ddsp(net: Network, feats: Tensor) -> dict[str, Tensor]:
    """feats: (batch, frames, 2) scaled f0 and loudness; returns controls."""
    h = nn.gru_scan(net.layers["gru"], feats)
    nn.record("gru", h, -1)
    h = T.relu(nn.linear_forward(net.layers["dense0"], h))
    nn.record("dense0", h, -1)
    h = T.relu(nn.linear_forward(net.layers["dense1"], h))
    nn.record("dense1", h, -1)
    amp = T.sigmoid(nn.linear_forward(net.layers["amp_head"], h))
    harm = T.sigmoid(nn.linear_forward(net.layers["harm_head"], h))
    # harmonic distribution sums to one so overall level lives in amp
    harm = T.div(harm, T.tsum(harm, axis=-1, keepdims=True))
    noise = T.sigmoid(nn.linear_forward(net.layers["noise_head"], h))
    nn.record("amp_head", amp, -1)
    nn.record("harm_head", harm, -1)
    nn.record("noise_head", noise, -1)
    return {"amp": amp, "harm": harm, "noise": noise}


nn.register_forward("wavenet", _forward_wavenet)
nn.register_forward("sing_ae", _forward_sing)
nn.register_forward("ddsp", _forward_ddsp)


# -- harmonic-plus-noise synthesis -------------------------------------------


def upsample_matrix(n_samples: int, n_frames: int, hop: int) -> np.ndarray:
    """Linear interpolation weights from frame rate to sample rate."""
    pos = np.arange(n_samples) / hop
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_frames - 1)
    hi = np.minimum(lo + 1, n_frames - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    u = np.zeros((n_samples, n_frames), dtype=np.float32)
    u[np.arange(n_samples), lo] += 1.0 - frac
    u[np.arange(n_samples), hi] += frac
    return u


_NOISE_BASIS_CACHE: dict = {}


def noise_band_basis(n_samples: int, n_bands: int, seed: int) -> np.ndarray:
    """(n_samples, n_bands) bandpassed white noise, each band peak-normalised."""
    key = (n_samples, n_bands, seed)
    basis = _NOISE_BASIS_CACHE.get(key)
    if basis is not None:
        return basis
    n = 1
    while n < n_samples:
        n *= 2
    white = np.random.default_rng(seed).standard_normal(n).astype(np.float32)
    spec = fourier.fft(white)
    half = n // 2 + 1
    band_of = np.minimum(np.arange(half) * n_bands // half, n_bands - 1)
    basis = np.zeros((n_samples, n_bands), dtype=np.float32)
    for k in range(n_bands):
        sel = np.flatnonzero(band_of == k)
        mask = np.zeros(n, dtype=np.float32)
        mask[sel] = 1.0
        mask[(-sel) % n] = 1.0
        band = fourier.ifft(spec * mask).real[:n_samples]
        basis[:, k] = band / (np.abs(band).max() + 1e-9)
    _NOISE_BASIS_CACHE[key] = basis
    return basis


def ddsp_synthesize(controls: dict[str, Tensor], f0_frames: np.ndarray,
                    meta: dict) -> Tensor:
    """Render (batch, frames*hop) audio from per-frame controls.

    Harmonics above Nyquist are masked out; the normalised harmonic
    distribution, sigmoid noise magnitudes, and sigmoid amplitude bound
    the output inside [-1, 1] by construction.
    """
    cfg = meta["config"]
    hop, sr = cfg["frame_hop"], cfg["sample_rate"]
    n_partials, n_bands = cfg["n_partials"], cfg["noise_bins"]
    f0 = np.asarray(f0_frames, dtype=np.float32)
    batch, n_frames = f0.shape
    n_samples = n_frames * hop
    u = upsample_matrix(n_samples, n_frames, hop)

    f0_up = f0 @ u.T  # (batch, samples)
    phase = 2.0 * np.pi * np.cumsum(f0_up / sr, axis=-1)
    k = np.arange(1, n_partials + 1, dtype=np.float32)
    sins = np.sin(phase[..., None] * k)
    alias_mask = (f0_up[..., None] * k) < (sr / 2.0)
    sin_bank = Tensor((sins * alias_mask).astype(np.float32))

    ut = Tensor(u)
    harm_up = T.matmul(ut, controls["harm"])  # (batch, samples, partials)
    harmonic = T.tsum(T.mul(harm_up, sin_bank), axis=-1)

    basis = Tensor(noise_band_basis(n_samples, n_bands, cfg["noise_seed"]))
    mags_up = T.matmul(ut, controls["noise"])  # (batch, samples, bands)
    noise = T.tsum(T.mul(mags_up, T.mul(basis, Tensor(1.0 / n_bands))), axis=-1)

    amp_up = T.reshape(T.matmul(ut, controls["amp"]), (batch, n_samples))
    mix = T.add(T.mul(harmonic, Tensor(0.8)), T.mul(noise, Tensor(0.2)))
    return T.mul(amp_up, mix)


def ddsp_features(f0_frames: np.ndarray, loud_frames: np.ndarray) -> np.ndarray:
    """Stack scaled f0 and loudness into the (batch, frames, 2) input."""
    return np.stack([np.asarray(f0_frames, dtype=np.float32) / 500.0,
                     np.asarray(loud_frames, dtype=np.float32)], axis=-1)


def ddsp_render(net: Network, batch: dict) -> Tensor:
    feats = Tensor(ddsp_features(batch["f0"], batch["loud"]))
    controls = net.forward(feats)
    return ddsp_synthesize(controls, batch["f0"], net.meta)


# -- losses -------------------------------------------------------------------


def nll_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; logits (batch, classes, time)."""
    b, c, t = logits.shape
    if targets.shape != (b, t):
        raise T.ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    lse = T.add(T.tlog(T.tsum(T.texp(z), axis=1, keepdims=True)), shift)
    onehot = np.zeros((b, c, t), dtype=np.float32)
    onehot[np.arange(b)[:, None], targets, np.arange(t)[None, :]] = 1.0
    picked = T.tsum(T.mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return T.tmean(T.sub(lse, picked))


def multiscale_spectral_loss(pred: Tensor, target: np.ndarray,
                             cfg: SpectrogramConfig) -> Tensor:
    """Sum over window sizes of mean |log-power difference|."""
    pred_specs = T.stft_logmag(pred, cfg)
    tgt_specs = T.stft_logmag(Tensor(np.asarray(target, dtype=np.float32)), cfg)
    total = None
    for p, q in zip(pred_specs, tgt_specs):
        term = T.tmean(T.tabs(T.sub(p, q)))
        total = term if total is None else T.add(total, term)
    return total


def forward_batch(net: Network, batch: dict):
    """Arch-appropriate forward pass on a batch dict (for scoring passes).

    Custom architectures provide their network input directly under "x".
    """
    if net.arch == "wavenet":
        wave = np.asarray(batch["wave"], dtype=np.float32)
        return net.forward(Tensor(wave[:, None, :-1]))
    if net.arch == "sing_ae":
        wave = np.asarray(batch["wave"], dtype=np.float32)
        return net.forward(Tensor(wave[:, None, :]))
    if net.arch == "ddsp":
        return net.forward(Tensor(ddsp_features(batch["f0"], batch["loud"])))
    if "x" in batch:
        return net.forward(Tensor(np.asarray(batch["x"], dtype=np.float32)))
    raise ValueError(f"no forward wrapper for arch '{net.arch}'")


def compute_loss(net: Network, batch: dict) -> Tensor:
    """Training objective on one batch; batch["wave"] is (batch, time)."""
    wave = np.asarray(batch["wave"], dtype=np.float32)
    if net.arch == "wavenet":
        codec = MuLawCodec(net.meta["config"]["n_classes"] - 1)
        logits = net.forward(Tensor(wave[:, None, :-1]))
        return nll_from_logits(logits, codec.encode(wave)[:, 1:])
    spec = spectrogram_from_meta(net.meta)
    if net.arch == "sing_ae":
        recon = net.forward(Tensor(wave[:, None, :]))
        return multiscale_spectral_loss(
            T.reshape(recon, (wave.shape[0], wave.shape[1])), wave, spec)
    if net.arch == "ddsp":
        return multiscale_spectral_loss(ddsp_render(net, batch), wave, spec)
    raise ValueError(f"no loss defined for arch '{net.arch}'")


# -- sampling -----------------------------------------------------------------


def wavenet_generate(net: Network, n_samples: int, seed: int,
                     temperature: float = 1.0) -> np.ndarray:
    """Sample a waveform autoregressively; deterministic given the seed."""
    cfg = ModelConfig(**net.meta["config"])
    codec = MuLawCodec(cfg.n_classes - 1)
    rf = receptive_field(cfg)
    buf = np.zeros(rf, dtype=np.float32)
    rng = np.random.default_rng(seed)
    out = np.empty(n_samples, dtype=np.float32)
    with T.no_grad():
        for i in range(n_samples):
            logits = net.forward(Tensor(buf[None, None, :])).data[0, :, -1]
            logits = logits / max(temperature, 1e-6)
            p = np.exp((logits - logits.max()).astype(np.float64))
            p /= p.sum()
            idx = rng.choice(cfg.n_classes, p=p)
            sample = codec.decode(np.array([idx]))[0]
            out[i] = sample
            buf = np.roll(buf, -1)
            buf[-1] = sample
    return out


def render(net: Network, batch: dict) -> np.ndarray:
    """Arch-appropriate deterministic reconstruction of a batch."""
    wave = np.asarray(batch["wave"], dtype=np.float32)
    with T.no_grad():
        if net.arch == "sing_ae":
            out = net.forward(Tensor(wave[:, None, :]))
            return out.data.reshape(wave.shape)
        if net.arch == "ddsp":
            return ddsp_render(net, batch).data
    raise ValueError(f"render() supports sing_ae and ddsp, not '{net.arch}'")
