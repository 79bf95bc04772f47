"""Static cost analysis for embedded deployment.

Answers three questions about a built network: how many floating-point
operations it needs per second of generated audio, how many bytes it
occupies on disk, and how many memory accesses one generated sample
costs. Verdicts compare those numbers against platform budgets loaded
from an editable JSON profile file.

Counting conventions (fixed so that the closed forms below equal an
instrumented per-scalar operation count exactly):

* one multiply-accumulate = 2 FLOPs; a bias add and the add folding two
  partial sums both count inside the matrix term
* linear, per invocation: 2 * n_in * n_out
* conv1d, per output frame: 2 * k * n_in * n_out
* batchnorm, per frame: 4 * n_in (subtract mean, scale by inverse
  deviation, scale by gamma, shift by beta)
* gru, per step: 6 * n_out * (n_in + n_out) for the six matrices, plus
  9 elementwise operations per unit:
      sigmoid (update gate)            1
      sigmoid (reset gate)             1
      tanh (candidate state)           1
      reset * recurrent candidate term 1
      one minus update                 1
      update * previous state          1
      retained * candidate             1
      blend add                        1
      state write-back into the
      recurrent buffer                 1

Activation functions BETWEEN layers (tanh/relu/sigmoid in the model
wrappers) are not billed: they are not prunable layers and their cost
is invariant under trimming of a fixed layer's output width only.

Memory-access model (reads + writes, per invocation): every weight and
bias scalar is read once, every input scalar is read once, every output
scalar is written once. A layer's output being read again downstream is
billed as the consumer's input reads.

* linear: n_in*n_out + n_out + n_in + n_out         (example 3->2: 13)
* conv1d, per frame: k*n_in*n_out + n_out + k*n_in + n_out
* batchnorm, per frame: 4*n_in + n_in + n_in
* gru, per step: 3*n_out*(n_in+n_out) + 3*n_out + n_in + n_out + n_out
  (x read once, previous state read once, new state written once)

Invocation rates: the autoregressive model runs every layer once per
output sample; the frame-based models run once per frame, so per-sample
costs amortize by the frame hop (the sample-level autoencoder has a hop
of one).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn

FLOPS_PER_MAC = 2


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    cpu_hz: float
    flops_per_sec: float
    drive_bytes: float
    ram_bytes: float

    def __post_init__(self):
        for field in ("cpu_hz", "flops_per_sec", "drive_bytes", "ram_bytes"):
            if not getattr(self, field) > 0:
                raise ValueError(f"platform '{self.name}': {field} must be positive")


@dataclass(frozen=True)
class EmbedReport:
    platform: str
    flops_per_audio_second: float
    disk_bytes: int
    rw_accesses_per_sample: float
    working_set_bytes: int
    realtime_ok: bool
    embeddable_ok: bool
    error_multiplier: float = float("nan")


def _dims(layer: nn.Layer) -> tuple[int, int, int]:
    """(n_in, n_out, kernel) from current parameter shapes."""
    if layer.kind == "linear":
        n_out, n_in = layer.params["w"].shape
        return n_in, n_out, 1
    if layer.kind == "conv1d":
        n_out, n_in, k = layer.params["w"].shape
        return n_in, n_out, k
    if layer.kind == "gru":
        n_out, n_in = layer.params["wz"].shape
        return n_in, n_out, 1
    if layer.kind == "batchnorm":
        n = layer.params["gamma"].shape[0]
        return n, n, 1
    raise ValueError(f"unknown layer kind '{layer.kind}'")


def layer_flops(layer: nn.Layer) -> int:
    """FLOPs for one invocation (one frame or one step) of the layer."""
    n_in, n_out, k = _dims(layer)
    if layer.kind == "linear":
        return FLOPS_PER_MAC * n_in * n_out
    if layer.kind == "conv1d":
        return FLOPS_PER_MAC * k * n_in * n_out
    if layer.kind == "gru":
        return 3 * FLOPS_PER_MAC * n_out * (n_in + n_out) + 9 * n_out
    if layer.kind == "batchnorm":
        return 4 * n_in
    raise ValueError(f"unknown layer kind '{layer.kind}'")


def layer_rw(layer: nn.Layer) -> int:
    """Memory accesses for one invocation of the layer."""
    n_in, n_out, k = _dims(layer)
    if layer.kind == "linear":
        return n_in * n_out + n_out + n_in + n_out
    if layer.kind == "conv1d":
        return k * n_in * n_out + n_out + k * n_in + n_out
    if layer.kind == "gru":
        return 3 * n_out * (n_in + n_out) + 3 * n_out + n_in + 2 * n_out
    if layer.kind == "batchnorm":
        return 6 * n_in
    raise ValueError(f"unknown layer kind '{layer.kind}'")


def _live_scalars(layer: nn.Layer) -> int:
    """Scalars simultaneously live while the layer executes one invocation."""
    n_in, n_out, k = _dims(layer)
    if layer.kind == "conv1d":
        return k * n_in + n_out
    if layer.kind == "gru":
        # input, previous state, and new state coexist
        return n_in + 2 * n_out
    return n_in + n_out


def invocations_per_second(net: nn.Network, sample_rate: int | None = None) -> float:
    """How many times each layer runs per generated second of audio."""
    cfg = net.meta.get("config", {}) if net.meta else {}
    sr = sample_rate if sample_rate is not None else cfg.get("sample_rate")
    if sr is None:
        raise ValueError("sample_rate not given and absent from network metadata")
    if net.arch == "ddsp":
        return sr / cfg["frame_hop"]
    return float(sr)


def count_flops(net: nn.Network, sample_rate: int | None = None) -> float:
    """Closed-form FLOPs per generated second of audio."""
    rate = invocations_per_second(net, sample_rate)
    return rate * sum(layer_flops(layer) for layer in net.layers.values())


def rw_memory(net: nn.Network, sample_rate: int | None = None) -> float:
    """Memory accesses per generated sample, amortized for frame models."""
    rate = invocations_per_second(net, sample_rate)
    cfg = net.meta.get("config", {}) if net.meta else {}
    sr = sample_rate if sample_rate is not None else cfg.get("sample_rate")
    per_second = rate * sum(layer_rw(layer) for layer in net.layers.values())
    return per_second / sr


def disk_size(net: nn.Network) -> int:
    """Bytes of the serialized checkpoint."""
    return len(nn.checkpoint_bytes(net))


def working_set_bytes(net: nn.Network) -> int:
    """Resident bytes under sequential layer execution: every stored
    parameter scalar plus the largest per-layer live activation set."""
    params = sum(p.data.size for p in net.parameters())
    buffers = sum(b.size for layer in net.layers.values()
                  for b in layer.buffers.values())
    peak = max((_live_scalars(layer) for layer in net.layers.values()), default=0)
    return 4 * (params + buffers + peak)


def feasibility(flops_per_audio_second: float, disk_bytes: int,
                rw_accesses_per_sample: float, working_set: int,
                profile: PlatformProfile,
                error_multiplier: float = float("nan")) -> EmbedReport:
    """Pure threshold verdicts for one platform."""
    realtime = flops_per_audio_second <= profile.flops_per_sec
    embeddable = (disk_bytes <= profile.drive_bytes
                  and working_set <= profile.ram_bytes)
    return EmbedReport(profile.name, flops_per_audio_second, disk_bytes,
                       rw_accesses_per_sample, working_set,
                       realtime, embeddable, error_multiplier)


def analyze(net: nn.Network, profiles: list[PlatformProfile],
            sample_rate: int | None = None,
            error_multiplier: float = float("nan")) -> list[EmbedReport]:
    flops = count_flops(net, sample_rate)
    disk = disk_size(net)
    rw = rw_memory(net, sample_rate)
    ws = working_set_bytes(net)
    return [feasibility(flops, disk, rw, ws, p, error_multiplier)
            for p in profiles]


DEFAULT_PLATFORMS = Path(__file__).parent / "data" / "platforms.json"


def load_platforms(path=None) -> list[PlatformProfile]:
    """Read platform profiles from JSON; ships with four default rows."""
    path = Path(path) if path is not None else DEFAULT_PLATFORMS
    doc = json.loads(path.read_text())
    rows = doc["platforms"] if isinstance(doc, dict) else doc
    out = []
    for row in rows:
        extra = set(row) - {"name", "cpu_hz", "flops_per_sec", "drive_bytes", "ram_bytes"}
        if extra:
            raise ValueError(f"platform entry has unknown keys {sorted(extra)}")
        out.append(PlatformProfile(**row))
    if not out:
        raise ValueError(f"no platforms defined in {path}")
    return out


def pareto_front(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated subset under (minimize error, minimize cost).

    Returns unique representatives ordered by cost ascending.
    """
    if not points:
        raise ValueError("pareto_front needs at least one point")
    ordered = sorted(set((float(e), float(c)) for e, c in points),
                     key=lambda p: (p[1], p[0]))
    front: list[tuple[float, float]] = []
    best_err = np.inf
    for err, cost in ordered:
        if err < best_err:
            front.append((err, cost))
            best_err = err
    return front


def write_report_csv(path, reports: list[EmbedReport]):
    cols = ["platform", "flops_per_audio_second", "disk_bytes",
            "rw_accesses_per_sample", "working_set_bytes",
            "realtime_ok", "embeddable_ok", "error_multiplier"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in reports:
            writer.writerow([r.platform, f"{r.flops_per_audio_second:.10g}",
                             r.disk_bytes, f"{r.rw_accesses_per_sample:.10g}",
                             r.working_set_bytes, int(r.realtime_ok),
                             int(r.embeddable_ok), f"{r.error_multiplier:.10g}"])


def summarize(reports: list[EmbedReport]) -> str:
    """Human-readable verdict table."""
    lines = []
    for r in reports:
        lines.append(
            f"{r.platform}: {r.flops_per_audio_second / 1e6:.3f} MFLOPs/s, "
            f"{r.disk_bytes / 1e3:.1f} KB disk, "
            f"{r.working_set_bytes / 1e3:.1f} KB working set, "
            f"{r.rw_accesses_per_sample:.0f} accesses/sample -> "
            f"realtime {'ok' if r.realtime_ok else 'NO'}, "
            f"embeddable {'ok' if r.embeddable_ok else 'NO'}"
        )
    return "\n".join(lines)
