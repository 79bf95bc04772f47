"""Experiment plumbing: synthetic tone datasets, WAV files, JSON configs,
the Adam training loop, and end-to-end run orchestration.

A run directory after run_experiment holds: config.json (canonical form),
trace.csv, per-iteration checkpoints, embed_reports.csv (one row per
iteration x platform), pareto.csv, reconstructed audio under samples/,
and a MANIFEST listing every artifact with the config hash. Identical
(config, seed) pairs reproduce every byte except the MANIFEST timestamp.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import criteria as cr
from . import embed, mi, models, nn, pruning
from . import tensor as T


# -- synthetic tones -----------------------------------------------------------


def gen_synthetic_tones(n_items: int, sr: int, duration: float, seed: int,
                        frame_hop: int = 200, n_partials: int = 16,
                        noise_bins: int = 17) -> list[dict]:
    """Harmonic-plus-noise tones with ground-truth conditioning.

    Each item dict carries "wave" (samples,), "f0" and "loud" (frames,).
    Fundamentals are uniform in [80, 800] Hz; 1..16 partials decay as 1/k
    with +/-20% amplitude jitter; a smooth attack/decay loudness envelope
    and a low filtered-noise floor complete the tone.
    """
    if sr not in (8000, 16000):
        raise ValueError(f"sample rate must be 8000 or 16000, got {sr}")
    if duration < 0.25:
        raise ValueError(f"duration must be at least 0.25 s, got {duration}")
    if n_items == 0:
        return []
    rng = np.random.default_rng(seed)
    n_frames = max(2, int(round(duration * sr / frame_hop)))
    synth_cfg = models.ModelConfig(arch="ddsp", sample_rate=sr,
                                   frame_hop=frame_hop, n_partials=n_partials,
                                   noise_bins=noise_bins)
    meta = {"config": dataclasses.asdict(synth_cfg)}

    items = []
    for start in range(0, n_items, 16):
        chunk = min(16, n_items - start)
        f0 = rng.uniform(80.0, 800.0, size=chunk).astype(np.float32)
        f0_frames = np.repeat(f0[:, None], n_frames, axis=1)

        harm = np.zeros((chunk, n_frames, n_partials), dtype=np.float32)
        for i in range(chunk):
            n_part = int(rng.integers(1, 17))
            k = np.arange(1, n_part + 1, dtype=np.float64)
            amps = (1.0 / k) * rng.uniform(0.8, 1.2, size=n_part)
            harm[i, :, :n_part] = (amps / amps.sum()).astype(np.float32)

        pos = np.arange(n_frames, dtype=np.float32) / n_frames
        env = np.empty((chunk, n_frames), dtype=np.float32)
        for i in range(chunk):
            attack = rng.uniform(0.1, 0.3)
            decay = rng.uniform(0.0, 1.2)
            env[i] = np.minimum(pos / attack, 1.0) * np.exp(-decay * pos)
        amp = (0.25 + 0.65 * env)[:, :, None]

        floor = rng.uniform(0.02, 0.08, size=chunk).astype(np.float32)
        noise = np.broadcast_to(floor[:, None, None],
                                (chunk, n_frames, noise_bins)).copy()

        with T.no_grad():
            wave = models.ddsp_synthesize(
                {"amp": T.Tensor(amp), "harm": T.Tensor(harm),
                 "noise": T.Tensor(noise)}, f0_frames, meta).data
        for i in range(chunk):
            items.append({"wave": wave[i].astype(np.float32),
                          "f0": f0_frames[i].copy(),
                          "loud": amp[i, :, 0].copy()})
    return items


# -- dataset splitting and batching ---------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    """80/10/10 partition of items; disjoint, exhaustive, seed-reproducible."""
    train: tuple
    valid: tuple
    test: tuple
    seed: int


def split_dataset(items: list, seed: int) -> DatasetSplit:
    n = len(items)
    if n < 10:
        raise ValueError(f"need at least 10 items for an 80/10/10 split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(n * 0.1 + 0.5)
    n_test = int(n * 0.1 + 0.5)
    valid = tuple(items[i] for i in order[:n_valid])
    test = tuple(items[i] for i in order[n_valid:n_valid + n_test])
    train = tuple(items[i] for i in order[n_valid + n_test:])
    return DatasetSplit(train, valid, test, seed)


def collate(items) -> dict:
    """Stack items into one batch dict; items must share lengths."""
    batch = {"wave": np.stack([np.asarray(it["wave"], dtype=np.float32)
                               for it in items])}
    if all("f0" in it for it in items):
        batch["f0"] = np.stack([np.asarray(it["f0"], dtype=np.float32)
                                for it in items])
        batch["loud"] = np.stack([np.asarray(it["loud"], dtype=np.float32)
                                  for it in items])
    return batch


def build_splits(split: DatasetSplit, batch_size: int) -> pruning.Splits:
    """Batched training split; single-item validation and test batches so
    every criterion (including information scoring) can consume them."""
    train = [collate(split.train[i:i + batch_size])
             for i in range(0, len(split.train), batch_size)]
    valid = [collate([it]) for it in split.valid]
    test = [collate([it]) for it in split.test]
    return pruning.Splits(train=train, valid=valid, test=test)


# -- WAV I/O ---------------------------------------------------------------------


class WavFormatError(ValueError):
    pass


def write_wav(path, wave: np.ndarray, sr: int):
    """Mono PCM16 writer; quantization scale 32768 so re-emitting a loaded
    file reproduces it byte for byte."""
    x = np.clip(np.asarray(wave, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload),
                         b"WAVE", b"fmt ", 16, 1, 1, sr, sr * 2, 2, 16,
                         b"data", len(payload))
    Path(path).write_bytes(header + payload)


def read_wav(path, sr_expected: int) -> np.ndarray:
    """Mono PCM16 RIFF reader, normalized by 1/32768."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path.name}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        pos += 8
        body = raw[pos:pos + size]
        if len(body) < size:
            raise WavFormatError(
                f"{path.name}: chunk {cid.decode(errors='replace')} declares "
                f"{size} bytes but only {len(body)} remain (truncated)")
        if cid == b"fmt ":
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path.name}: missing fmt or data chunk")
    audio_format, channels, sr, _, _, bits = fmt
    if audio_format != 1 or bits != 16:
        raise WavFormatError(
            f"{path.name}: only PCM 16-bit is supported "
            f"(format {audio_format}, {bits} bits)")
    if channels != 1:
        raise WavFormatError(f"{path.name}: {channels} channels unsupported, "
                             "expected mono")
    if sr != sr_expected:
        raise WavFormatError(f"{path.name}: sample rate {sr} does not match "
                             f"expected {sr_expected}")
    pcm = np.frombuffer(data, dtype="<i2")
    return (pcm.astype(np.float32) / 32768.0).astype(np.float32)


def load_wav_dir(path, sr_expected: int) -> list[dict]:
    """Items from a directory of mono PCM16 WAV files, sorted by name.

    A conditioning.json sidecar (written by save_dataset) restores the
    per-file f0/loudness frames for synthesizer models.
    """
    path = Path(path)
    files = sorted(path.glob("*.wav"))
    if not files:
        raise WavFormatError(f"no .wav files under {path}")
    cond = {}
    sidecar = path / "conditioning.json"
    if sidecar.exists():
        cond = json.loads(sidecar.read_text())
    items = []
    for f in files:
        item = {"wave": read_wav(f, sr_expected)}
        if f.name in cond:
            item["f0"] = np.asarray(cond[f.name]["f0"], dtype=np.float32)
            item["loud"] = np.asarray(cond[f.name]["loud"], dtype=np.float32)
        items.append(item)
    return items


def save_dataset(items: list[dict], path, sr: int):
    """Write items as WAVs plus a conditioning.json sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cond = {}
    for i, item in enumerate(items):
        name = f"tone_{i:04d}.wav"
        write_wav(path / name, item["wave"], sr)
        if "f0" in item:
            cond[name] = {"f0": np.asarray(item["f0"], dtype=float).tolist(),
                          "loud": np.asarray(item["loud"], dtype=float).tolist()}
    if cond:
        (path / "conditioning.json").write_text(json.dumps(cond))


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic_tones"
    n_items: int = 64
    sr: int = 16000
    duration: float = 0.25
    wav_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic_tones", "wav_dir"):
            raise ValueError(f"dataset kind must be synthetic_tones or wav_dir, "
                             f"got '{self.kind}'")
        if self.kind == "wav_dir" and not self.wav_dir:
            raise ValueError("dataset kind wav_dir needs a wav_dir path")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 2e-4
    plateau_patience: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    model: models.ModelConfig
    dataset: DatasetConfig = DatasetConfig()
    training: TrainingConfig = TrainingConfig()
    imp: pruning.ImpConfig = pruning.ImpConfig()
    platforms: str | None = None
    output_dir: str = "runs/experiment"
    seed: int = 0
    emit_samples: bool = True


def _from_section(cls, section: dict, name: str, coerce=None):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(section) - known
    if extra:
        raise ValueError(f"unknown key(s) {sorted(extra)} in config section "
                         f"'{name}'")
    kwargs = dict(section)
    if coerce:
        coerce(kwargs)
    return cls(**kwargs)


def _coerce_model(kwargs):
    if "spec_windows" in kwargs:
        kwargs["spec_windows"] = tuple(kwargs["spec_windows"])


def _coerce_imp(kwargs):
    scaling = kwargs.get("scaling")
    if isinstance(scaling, str):
        kwargs["scaling"] = cr.ScalingScheme(scaling)
    elif isinstance(scaling, dict):
        kwargs["scaling"] = cr.ScalingScheme(**scaling)
    mi_cfg = kwargs.get("mi")
    if isinstance(mi_cfg, dict):
        if "bin_counts" in mi_cfg:
            mi_cfg = dict(mi_cfg, bin_counts=tuple(mi_cfg["bin_counts"]))
        kwargs["mi"] = mi.MiConfig(**mi_cfg)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a validated config from plain JSON data; unknown keys are
    rejected at every level."""
    top_known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    extra = set(doc) - top_known
    if extra:
        raise ValueError(f"unknown top-level config key(s) {sorted(extra)}")
    if "model" not in doc:
        raise ValueError("config needs a 'model' section")
    kwargs = {"model": _from_section(models.ModelConfig, doc["model"],
                                     "model", _coerce_model)}
    if "dataset" in doc:
        kwargs["dataset"] = _from_section(DatasetConfig, doc["dataset"], "dataset")
    if "training" in doc:
        kwargs["training"] = _from_section(TrainingConfig, doc["training"],
                                           "training")
    if "imp" in doc:
        kwargs["imp"] = _from_section(pruning.ImpConfig, doc["imp"], "imp",
                                      _coerce_imp)
    for key in ("platforms", "output_dir", "seed", "emit_samples"):
        if key in doc:
            kwargs[key] = doc[key]
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return config_from_dict(json.loads(path.read_text()))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["output_dir"] = str(doc["output_dir"])
    doc["model"]["spec_windows"] = list(doc["model"]["spec_windows"])
    imp_doc = doc["imp"]
    imp_doc["scaling"] = imp_doc["scaling"]["kind"]
    if imp_doc["mi"] is not None:
        imp_doc["mi"]["bin_counts"] = list(imp_doc["mi"]["bin_counts"])
    return doc


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


# -- Adam training ------------------------------------------------------------------


def adam_trainer(epochs: int = 30, batch_size: int = 64, lr: float = 1e-3,
                 weight_decay: float = 2e-4, plateau_patience: int = 10,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 seed: int = 0, loss_fn=models.compute_loss):
    """Adam with decoupled weight decay and plateau-halved learning rate.

    The learning rate halves after ``plateau_patience`` consecutive epochs
    without a validation improvement; training ends at the epoch budget or
    once validation has stalled through two full patience windows. The
    returned callable follows the pruning trainer contract: it trains the
    net in place and returns the parameter snapshot after ``record_step``
    optimizer steps (0 = the initial values) when one is requested.
    """
    del batch_size  # batching is fixed upstream in the splits

    def train(net, splits, record_step=None, after_step=None):
        state_k = net.param_state() if record_step == 0 else None
        rng = np.random.default_rng(seed)
        m = {name: np.zeros_like(p.data, dtype=np.float64)
             for name, p in net.named_parameters()}
        v = {name: np.zeros_like(p.data, dtype=np.float64)
             for name, p in net.named_parameters()}
        cur_lr = lr
        b1, b2 = betas
        t = 0
        best = np.inf
        stalled = 0
        for _ in range(epochs):
            net.train()
            order = rng.permutation(len(splits.train))
            for bi in order:
                net.zero_grad()
                loss_fn(net, splits.train[int(bi)]).backward()
                t += 1
                for name, p in net.named_parameters():
                    g = p.grad
                    if g is None:
                        continue
                    m[name] = b1 * m[name] + (1.0 - b1) * g
                    v[name] = b2 * v[name] + (1.0 - b2) * (g * g)
                    mhat = m[name] / (1.0 - b1 ** t)
                    vhat = v[name] / (1.0 - b2 ** t)
                    p.data = (p.data - cur_lr * (mhat / (np.sqrt(vhat) + eps)
                                                 + weight_decay * p.data)
                              ).astype(np.float32)
                if after_step is not None:
                    after_step(net)
                if record_step == t:
                    state_k = net.param_state()
            net.zero_grad()
            net.eval()
            with T.no_grad():
                vloss = float(np.mean([loss_fn(net, b).data
                                       for b in splits.valid]))
            if vloss < best:
                best = vloss
                stalled = 0
            else:
                stalled += 1
                if stalled % plateau_patience == 0:
                    cur_lr *= 0.5
                if stalled >= 2 * plateau_patience:
                    break
        net.eval()
        if record_step is not None and state_k is None:
            raise ValueError(f"rewind step {record_step} lies beyond the "
                             f"{t} training steps taken")
        return state_k

    return train


# -- experiment orchestration ----------------------------------------------------


def _build_dataset(cfg: ExperimentConfig) -> list[dict]:
    ds = cfg.dataset
    if ds.kind == "wav_dir":
        return load_wav_dir(ds.wav_dir, ds.sr)
    hop = cfg.model.frame_hop if cfg.model.arch == "ddsp" else 200
    return gen_synthetic_tones(ds.n_items, ds.sr, ds.duration, cfg.seed,
                               frame_hop=hop)


def _emit_samples(out: Path, trace: pruning.ImpTrace, splits: pruning.Splits,
                  sr: int):
    picks = sorted({0, len(trace.records) // 2, len(trace.records) - 1})
    sample_dir = out / "samples"
    sample_dir.mkdir(exist_ok=True)
    batch = splits.test[0]
    for idx in picks:
        it = trace.records[idx].iteration
        net = nn.load_checkpoint(out / f"iter_{it:02d}.ckpt")
        if net.arch == "wavenet":
            wave = models.wavenet_generate(net, int(0.25 * sr), seed=0)
        else:
            wave = models.render(net, batch)[0]
        write_wav(sample_dir / f"iter_{it:02d}.wav", wave, sr)


def _emit_embed_reports(out: Path, trace: pruning.ImpTrace,
                        profiles: list[embed.PlatformProfile]):
    rows = []
    for rec in trace.records:
        net = nn.load_checkpoint(out / f"iter_{rec.iteration:02d}.ckpt")
        for rep in embed.analyze(net, profiles,
                                 error_multiplier=rec.test_error_multiplier):
            rows.append((rec.iteration, rep))
    with open(out / "embed_reports.csv", "w", newline="") as fh:
        import csv as _csv
        writer = _csv.writer(fh)
        writer.writerow(["iteration", "platform", "flops_per_audio_second",
                         "disk_bytes", "rw_accesses_per_sample",
                         "working_set_bytes", "realtime_ok", "embeddable_ok",
                         "error_multiplier"])
        for it, r in rows:
            writer.writerow([it, r.platform, f"{r.flops_per_audio_second:.10g}",
                             r.disk_bytes, f"{r.rw_accesses_per_sample:.10g}",
                             r.working_set_bytes, int(r.realtime_ok),
                             int(r.embeddable_ok), f"{r.error_multiplier:.10g}"])


def _emit_pareto(out: Path, trace: pruning.ImpTrace):
    points = [(r.test_error_multiplier, r.flops_per_second_audio)
              for r in trace.records]
    front = embed.pareto_front(points)
    with open(out / "pareto.csv", "w", newline="") as fh:
        import csv as _csv
        writer = _csv.writer(fh)
        writer.writerow(["flops_per_second_audio", "test_error_multiplier"])
        for err, cost in front:
            writer.writerow([f"{cost:.10g}", f"{err:.10g}"])


def _write_manifest(out: Path, cfg: ExperimentConfig, status: str):
    lines = [f"status: {status}",
             f"config_hash: {config_hash(cfg)}",
             f"written_at: {time.strftime('%Y-%m-%dT%H:%M:%S')}",
             "artifacts:"]
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "MANIFEST.txt":
            lines.append(f"  {p.relative_to(out)} ({p.stat().st_size} bytes)")
    (out / "MANIFEST.txt").write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig) -> pruning.ImpTrace:
    """Dense baseline + IMP per the config; artifacts land in output_dir."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    try:
        items = _build_dataset(cfg)
        split = split_dataset(items, cfg.seed)
        splits = build_splits(split, cfg.training.batch_size)
        net = models.build_model(cfg.model, seed=cfg.seed)
        tr = cfg.training
        trainer = adam_trainer(epochs=tr.epochs, batch_size=tr.batch_size,
                               lr=tr.lr, weight_decay=tr.weight_decay,
                               plateau_patience=tr.plateau_patience,
                               seed=cfg.seed)
        trace = pruning.run_imp(net, splits, cfg.imp, trainer, out_dir=out)
        profiles = embed.load_platforms(cfg.platforms)
        _emit_embed_reports(out, trace, profiles)
        _emit_pareto(out, trace)
        if cfg.emit_samples:
            _emit_samples(out, trace, splits, cfg.dataset.sr)
    except Exception as exc:
        _write_manifest(out, cfg, f"incomplete ({type(exc).__name__}: {exc})")
        raise
    status = "complete"
    if trace.aborted:
        status = f"complete (aborted: {trace.aborted})"
    elif trace.stopped:
        status = f"complete (stopped: {trace.stopped})"
    _write_manifest(out, cfg, status)
    return trace


def run_paired(cfg: ExperimentConfig) -> dict:
    """Mask-vs-trim comparison from one dense start; both runs share the
    config except for the pruning mode. Emits paired.csv with the two
    multiplier curves keyed by their weight-remaining fractions."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces = {}
    for mode in ("trim", "mask"):
        imp = dataclasses.replace(
            cfg.imp, mode=mode,
            criterion=cfg.imp.criterion if mode == "trim" else "magnitude")
        sub = dataclasses.replace(cfg, imp=imp,
                                  output_dir=str(out / mode))
        traces[mode] = run_experiment(sub)
    rows = max(len(t.records) for t in traces.values())
    with open(out / "paired.csv", "w", newline="") as fh:
        import csv as _csv
        writer = _csv.writer(fh)
        writer.writerow(["iteration",
                         "trim_weights_remaining_frac", "trim_error_multiplier",
                         "mask_weights_remaining_frac", "mask_error_multiplier"])
        for i in range(rows):
            row = [i]
            for mode in ("trim", "mask"):
                recs = traces[mode].records
                if i < len(recs):
                    row += [f"{recs[i].weights_remaining_frac:.10g}",
                            f"{recs[i].test_error_multiplier:.10g}"]
                else:
                    row += ["", ""]
            writer.writerow(row)
    return traces
