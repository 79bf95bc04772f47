"""Networks of named layers with structured unit removal.

A Network is an ordered set of layers plus the wiring needed to remove
whole units safely: trim groups tie layers whose output channels must
stay aligned (residual streams, gated filter/gate pairs), and each
layer's `in_source` names the layer whose units feed its input axis.
From that wiring both pruning modes follow:

* masking zeroes a unit's outgoing rows, bias, and every consumer's
  matching input columns, keeping shapes intact;
* trimming deletes the same slices physically, shrinking the arrays.

The two must agree: a trimmed forward pass matches the equivalently
masked one to float precision. Checkpoints serialise the full structure
(not just weights) so a trimmed network round-trips byte for byte.
"""

from __future__ import annotations

import contextlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class StructureError(ValueError):
    pass


# canonical parameter order per layer kind; serialisation and counting
# walk params in exactly this order
_PARAM_ORDER = {
    "linear": ("w", "b"),
    "conv1d": ("w", "b"),
    "gru": ("wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh"),
    "batchnorm": ("gamma", "beta"),
}
_BUFFER_ORDER = {
    "linear": (),
    "conv1d": (),
    "gru": (),
    "batchnorm": ("running_mean", "running_var"),
}

# which axis of each parameter indexes which unit space:
# "out"  = this layer's own units, "in" = units of the in_source layer,
# "self" = own units again but on the input side (recurrent matrices),
# None   = structural axis untouched by pruning (e.g. kernel taps)
_AXIS_ROLES = {
    "linear": {"w": ("out", "in"), "b": ("out",)},
    "conv1d": {"w": ("out", "in", None), "b": ("out",)},
    "gru": {
        "wz": ("out", "in"), "wr": ("out", "in"), "wh": ("out", "in"),
        "uz": ("out", "self"), "ur": ("out", "self"), "uh": ("out", "self"),
        "bz": ("out",), "br": ("out",), "bh": ("out",),
    },
    "batchnorm": {
        "gamma": ("out",), "beta": ("out",),
        "running_mean": ("out",), "running_var": ("out",),
    },
}

_UNIT_PARAM = {"linear": "w", "conv1d": "w", "gru": "bz", "batchnorm": "gamma"}


@dataclass
class Layer:
    name: str
    kind: str
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    in_source: str | None = None
    dilation: int = 1
    eps: float = 1e-5

    @property
    def n_units(self) -> int:
        return self.params[_UNIT_PARAM[self.kind]].shape[0]

    def param_order(self):
        return _PARAM_ORDER[self.kind]

    def buffer_order(self):
        return _BUFFER_ORDER[self.kind]


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


def make_linear(name, n_in, n_out, rng, in_source=None) -> Layer:
    params = {
        "w": Tensor(_init(rng, (n_out, n_in), n_in), requires_grad=True),
        "b": Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True),
    }
    return Layer(name, "linear", params, in_source=in_source)


def make_conv(name, n_in, n_out, kernel, rng, dilation=1, in_source=None) -> Layer:
    params = {
        "w": Tensor(_init(rng, (n_out, n_in, kernel), n_in * kernel), requires_grad=True),
        "b": Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True),
    }
    return Layer(name, "conv1d", params, in_source=in_source, dilation=dilation)


def make_gru(name, n_in, n_hidden, rng, in_source=None) -> Layer:
    params = {}
    for g in ("z", "r", "h"):
        params["w" + g] = Tensor(_init(rng, (n_hidden, n_in), n_in), requires_grad=True)
        params["u" + g] = Tensor(_init(rng, (n_hidden, n_hidden), n_hidden), requires_grad=True)
        params["b" + g] = Tensor(np.zeros(n_hidden, dtype=np.float32), requires_grad=True)
    return Layer(name, "gru", params, in_source=in_source)


def make_batchnorm(name, n, in_source) -> Layer:
    params = {
        "gamma": Tensor(np.ones(n, dtype=np.float32), requires_grad=True),
        "beta": Tensor(np.zeros(n, dtype=np.float32), requires_grad=True),
    }
    buffers = {
        "running_mean": np.zeros(n, dtype=np.float32),
        "running_var": np.ones(n, dtype=np.float32),
    }
    return Layer(name, "batchnorm", params, buffers=buffers, in_source=in_source)


@dataclass
class Pool:
    """One removable unit space: the layers whose out-axes share it."""
    pid: str
    members: tuple[str, ...]
    kept: np.ndarray  # original unit ids still present, in current order
    orig: int


_FORWARDS: dict = {}


def register_forward(arch: str, fn):
    _FORWARDS[arch] = fn


class Tape:
    """Collects per-layer unit activations during forward passes.

    mode "sum": accumulates sum of |activation| per unit across every
    recorded pass (activation statistics). mode "full": keeps each pass
    as a (units, steps) array (information scoring).
    """

    def __init__(self, mode: str):
        if mode not in ("sum", "full"):
            raise ValueError(f"tape mode must be 'sum' or 'full', got '{mode}'")
        self.mode = mode
        self.data: dict = {}


_TAPE: Tape | None = None


@contextlib.contextmanager
def capture(mode: str = "sum"):
    global _TAPE
    prev = _TAPE
    _TAPE = Tape(mode)
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def record(name: str, t: Tensor, unit_axis: int):
    """Log a layer's output on the active tape, if any."""
    tape = _TAPE
    if tape is None:
        return
    arr = t.data
    ax = unit_axis % arr.ndim
    if tape.mode == "sum":
        axes = tuple(i for i in range(arr.ndim) if i != ax)
        red = np.abs(arr).sum(axis=axes) if axes else np.abs(arr)
        prev = tape.data.get(name)
        tape.data[name] = red if prev is None else prev + red
    else:
        series = np.moveaxis(arr, ax, 0).reshape(arr.shape[ax], -1)
        tape.data.setdefault(name, []).append(series)


class Network:
    def __init__(self, arch: str, layers: list[Layer], trim_groups=(),
                 protected=(), meta=None, kept_units=None, orig_units=None):
        self.arch = arch
        self.layers: dict[str, Layer] = {}
        for layer in layers:
            if layer.name in self.layers:
                raise StructureError(f"duplicate layer name '{layer.name}'")
            self.layers[layer.name] = layer
        self.trim_groups = [list(g) for g in trim_groups]
        self.protected = frozenset(protected)
        self.meta = dict(meta or {})
        self.training = True
        self.masks: dict[str, np.ndarray] | None = None
        self._validate_structure()
        self._build_pools(kept_units or {}, orig_units or {})

    # -- structure -----------------------------------------------------

    def _validate_structure(self):
        for layer in self.layers.values():
            if layer.kind not in _PARAM_ORDER:
                raise StructureError(f"unknown layer kind '{layer.kind}'")
            if layer.in_source is not None and layer.in_source not in self.layers:
                raise StructureError(
                    f"layer '{layer.name}' reads from unknown layer '{layer.in_source}'"
                )
        seen = set()
        for group in self.trim_groups:
            sizes = set()
            for name in group:
                if name not in self.layers:
                    raise StructureError(f"trim group names unknown layer '{name}'")
                if name in self.protected:
                    raise StructureError(f"protected layer '{name}' cannot join a trim group")
                if name in seen:
                    raise StructureError(f"layer '{name}' appears in two trim groups")
                seen.add(name)
                sizes.add(self.layers[name].n_units)
            if len(sizes) > 1:
                raise StructureError(f"trim group {group} mixes unit counts {sorted(sizes)}")

    def _build_pools(self, kept_units, orig_units):
        self.pools: dict[str, Pool] = {}
        self.pool_of: dict[str, str] = {}
        for group in self.trim_groups:
            pid = group[0]
            for name in group:
                self.pool_of[name] = pid
            self.pools[pid] = self._make_pool(pid, tuple(group), kept_units, orig_units)
        for name, layer in self.layers.items():
            if name in self.pool_of or name in self.protected:
                continue
            if layer.kind == "batchnorm":
                # normalisation shares its producer's unit space
                src = self.pool_of.get(layer.in_source)
                if src is not None:
                    pool = self.pools[src]
                    self.pools[src] = Pool(pool.pid, pool.members + (name,),
                                           pool.kept, pool.orig)
                    self.pool_of[name] = src
                continue
            self.pool_of[name] = name
            self.pools[name] = self._make_pool(name, (name,), kept_units, orig_units)
        for pool in self.pools.values():
            for name in pool.members:
                if self.layers[name].n_units != len(pool.kept):
                    raise StructureError(
                        f"layer '{name}' has {self.layers[name].n_units} units but "
                        f"pool '{pool.pid}' tracks {len(pool.kept)}"
                    )

    def _make_pool(self, pid, members, kept_units, orig_units):
        n = self.layers[pid].n_units
        kept = np.asarray(kept_units.get(pid, np.arange(n)), dtype=np.int64)
        return Pool(pid, members, kept, int(orig_units.get(pid, n)))

    def consumers_of(self, pid: str) -> list[str]:
        out = []
        for name, layer in self.layers.items():
            if layer.in_source is None:
                continue
            if self.pool_of.get(layer.in_source) == pid and self.pool_of.get(name) != pid:
                out.append(name)
        return out

    # -- parameters ----------------------------------------------------

    def named_parameters(self):
        for name, layer in self.layers.items():
            for pname in layer.param_order():
                yield f"{name}.{pname}", layer.params[pname]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_param_state(self, state: dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            src = state[name]
            if src.shape != p.data.shape:
                raise StructureError(
                    f"state for '{name}' has shape {src.shape}, expected {p.data.shape}"
                )
            p.data = src.astype(np.float32).copy()

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, *args, **kwargs):
        fn = _FORWARDS.get(self.arch)
        if fn is None:
            raise StructureError(f"no forward registered for arch '{self.arch}'")
        return fn(self, *args, **kwargs)

    def clone(self) -> "Network":
        layers = []
        for layer in self.layers.values():
            params = {k: Tensor(v.data.copy(), requires_grad=True)
                      for k, v in layer.params.items()}
            buffers = {k: v.copy() for k, v in layer.buffers.items()}
            layers.append(Layer(layer.name, layer.kind, params, buffers,
                                layer.in_source, layer.dilation, layer.eps))
        net = Network(self.arch, layers, self.trim_groups, self.protected, self.meta,
                      kept_units={pid: p.kept.copy() for pid, p in self.pools.items()},
                      orig_units={pid: p.orig for pid, p in self.pools.items()})
        net.training = self.training
        if self.masks is not None:
            net.masks = {pid: m.copy() for pid, m in self.masks.items()}
        return net

    # -- unit and weight bookkeeping ------------------------------------

    def _kept_count(self, pid: str) -> int:
        if self.masks is not None:
            return int(self.masks[pid].sum())
        return len(self.pools[pid].kept)

    def units_remaining(self) -> int:
        return sum(self._kept_count(pid) for pid in self.pools)

    def units_original(self) -> int:
        return sum(p.orig for p in self.pools.values())

    def _axis_count(self, layer: Layer, role, dim: int, orig: bool) -> int:
        if role == "out" or role == "self":
            pid = self.pool_of.get(layer.name)
        elif role == "in":
            pid = self.pool_of.get(layer.in_source) if layer.in_source else None
        else:
            pid = None
        if pid is None:
            return dim
        if orig:
            return self.pools[pid].orig
        return self._kept_count(pid)

    def weight_counts(self) -> tuple[int, int]:
        """(remaining, original) trainable parameter entries.

        Masked-out entries count as removed even though the arrays still
        hold them, so both pruning modes report comparable numbers.
        """
        remaining = 0
        original = 0
        for layer in self.layers.values():
            roles = _AXIS_ROLES[layer.kind]
            for pname in layer.param_order():
                shape = layer.params[pname].shape
                rem, orig = 1, 1
                for axis, role in enumerate(roles[pname]):
                    rem *= self._axis_count(layer, role, shape[axis], orig=False)
                    orig *= self._axis_count(layer, role, shape[axis], orig=True)
                remaining += rem
                original += orig
        return remaining, original

    # -- masking ---------------------------------------------------------

    def init_masks(self):
        for pool in self.pools.values():
            if len(pool.kept) != pool.orig:
                raise StructureError("masking must start from an untrimmed network")
        self.masks = {pid: np.ones(p.orig, dtype=bool) for pid, p in self.pools.items()}

    def mask_units(self, plan: dict[str, np.ndarray]):
        """Mark units dead. plan maps pool id -> unit indices to remove."""
        if self.masks is None:
            raise StructureError("init_masks() before mask_units()")
        _validate_plan(self, plan)
        for pid, idx in plan.items():
            self.masks[pid][np.asarray(idx, dtype=np.int64)] = False
        self.enforce_masks()

    def enforce_masks(self):
        """Zero every entry belonging to a dead unit. Idempotent; call
        after each optimiser step so masked entries stay exactly zero."""
        if self.masks is None:
            return
        for pid, keep in self.masks.items():
            dead = np.flatnonzero(~keep)
            if dead.size == 0:
                continue
            for member in self.pools[pid].members:
                self._zero_axes(self.layers[member], ("out", "self"), dead)
            for cname in self.consumers_of(pid):
                self._zero_axes(self.layers[cname], ("in",), dead)

    def _zero_axes(self, layer: Layer, roles_to_zero, dead):
        roles = _AXIS_ROLES[layer.kind]
        for pname in layer.param_order():
            arr = layer.params[pname].data
            for axis, role in enumerate(roles[pname]):
                if role in roles_to_zero:
                    idx = [slice(None)] * arr.ndim
                    idx[axis] = dead
                    arr[tuple(idx)] = 0.0
        for bname in layer.buffer_order():
            arr = layer.buffers[bname]
            for axis, role in enumerate(roles[bname]):
                if role in roles_to_zero:
                    idx = [slice(None)] * arr.ndim
                    idx[axis] = dead
                    arr[tuple(idx)] = 0.0


def _validate_plan(net: Network, plan: dict[str, np.ndarray]):
    # mask-mode plans index the original unit space (the mask array);
    # trim-mode plans index the current kept order
    for pid, idx in plan.items():
        if pid not in net.pools:
            raise StructureError(f"unknown pool '{pid}' in removal plan")
        idx = np.asarray(idx, dtype=np.int64)
        space = net.masks[pid].size if net.masks is not None else net._kept_count(pid)
        if idx.size and (idx.min() < 0 or idx.max() >= space):
            raise StructureError(
                f"pool '{pid}' removal indices out of range for {space} units"
            )
        if len(np.unique(idx)) != idx.size:
            raise StructureError(f"pool '{pid}' removal indices repeat")
        if net.masks is not None:
            left_after = int(net.masks[pid].sum())
            if idx.size:
                left_after -= int(net.masks[pid][idx].sum())
        else:
            left_after = space - idx.size
        if left_after < 1:
            raise StructureError(
                f"pool '{pid}' would lose all its units; at least one must stay"
            )


def apply_trim(net: Network, plan: dict[str, np.ndarray]) -> Network:
    """Physically delete units. Returns a new network; `net` is untouched.

    plan maps pool id -> unit indices to remove, in the network's current
    (post any earlier trims) index space.
    """
    if net.masks is not None:
        raise StructureError("cannot trim a masked network; modes are exclusive")
    _validate_plan(net, plan)
    out = net.clone()
    keep_cur: dict[str, np.ndarray] = {}
    for pid, idx in plan.items():
        n = len(out.pools[pid].kept)
        mask = np.ones(n, dtype=bool)
        mask[np.asarray(idx, dtype=np.int64)] = False
        keep_cur[pid] = np.flatnonzero(mask)
    for layer in out.layers.values():
        roles = _AXIS_ROLES[layer.kind]
        own = out.pool_of.get(layer.name)
        src = out.pool_of.get(layer.in_source) if layer.in_source else None
        for pname in layer.param_order():
            arr = layer.params[pname].data
            for axis, role in enumerate(roles[pname]):
                pid = own if role in ("out", "self") else src if role == "in" else None
                if pid in keep_cur:
                    arr = np.take(arr, keep_cur[pid], axis=axis)
            layer.params[pname] = Tensor(arr, requires_grad=True)
        for bname in layer.buffer_order():
            arr = layer.buffers[bname]
            for axis, role in enumerate(roles[bname]):
                pid = own if role in ("out", "self") else None
                if pid in keep_cur:
                    arr = np.take(arr, keep_cur[pid], axis=axis)
            layer.buffers[bname] = arr
    for pid, keep in keep_cur.items():
        pool = out.pools[pid]
        out.pools[pid] = Pool(pool.pid, pool.members, pool.kept[keep], pool.orig)
    for pool in out.pools.values():
        for name in pool.members:
            assert out.layers[name].n_units == len(pool.kept)
    return out


def restrict_param(net: Network, layer_name: str, pname: str,
                   full: np.ndarray) -> np.ndarray:
    """Slice an original-shape array down to the network's surviving units.

    Used to rewind a trimmed network to stored initial weights: the stored
    arrays keep their original shapes, this picks out the rows/columns that
    are still present.
    """
    layer = net.layers[layer_name]
    roles = _AXIS_ROLES[layer.kind][pname]
    own = net.pool_of.get(layer_name)
    src = net.pool_of.get(layer.in_source) if layer.in_source else None
    arr = full
    for axis, role in enumerate(roles):
        pid = own if role in ("out", "self") else src if role == "in" else None
        if pid is not None:
            arr = np.take(arr, net.pools[pid].kept, axis=axis)
    return arr


# -- layer forward helpers ---------------------------------------------


def linear_forward(layer: Layer, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, T.transpose(layer.params["w"])), layer.params["b"])


def conv_forward(layer: Layer, x: Tensor) -> Tensor:
    y = T.conv1d_dilated_causal(x, layer.params["w"], layer.dilation)
    return T.add(y, T.reshape(layer.params["b"], (-1, 1)))


def batchnorm_forward(layer: Layer, x: Tensor, training: bool,
                      momentum: float = 0.1) -> Tensor:
    if x.ndim != 3:
        raise T.ShapeError(f"batchnorm expects (batch, channels, time), got {x.shape}")
    gamma = T.reshape(layer.params["gamma"], (1, -1, 1))
    beta = T.reshape(layer.params["beta"], (1, -1, 1))
    if training:
        m = T.tmean(x, axis=(0, 2), keepdims=True)
        d = T.sub(x, m)
        v = T.tmean(T.mul(d, d), axis=(0, 2), keepdims=True)
        # running stats track the batch (biased) moments
        rm, rv = layer.buffers["running_mean"], layer.buffers["running_var"]
        rm *= 1.0 - momentum
        rm += momentum * m.data.reshape(-1)
        rv *= 1.0 - momentum
        rv += momentum * v.data.reshape(-1)
        xn = T.div(d, T.tsqrt(T.add(v, Tensor(layer.eps))))
    else:
        rm = Tensor(layer.buffers["running_mean"].reshape(1, -1, 1))
        rv = Tensor(layer.buffers["running_var"].reshape(1, -1, 1))
        xn = T.div(T.sub(x, rm), T.tsqrt(T.add(rv, Tensor(layer.eps))))
    return T.add(T.mul(xn, gamma), beta)


def gru_cell(layer: Layer, x_t: Tensor, h: Tensor) -> Tensor:
    p = layer.params
    def gate(w, u, b, state):
        return T.add(T.add(T.matmul(x_t, T.transpose(p[w])),
                           T.matmul(state, T.transpose(p[u]))), p[b])
    z = T.sigmoid(gate("wz", "uz", "bz", h))
    r = T.sigmoid(gate("wr", "ur", "br", h))
    hh = T.tanh(gate("wh", "uh", "bh", T.mul(r, h)))
    return T.add(T.mul(T.sub(Tensor(1.0), z), h), T.mul(z, hh))


def gru_scan(layer: Layer, x: Tensor) -> Tensor:
    """Run a GRU over (batch, time, features); returns (batch, time, units)."""
    if x.ndim != 3:
        raise T.ShapeError(f"gru expects (batch, time, features), got {x.shape}")
    b, t, _ = x.shape
    h = Tensor(np.zeros((b, layer.n_units), dtype=np.float32))
    steps = []
    for i in range(t):
        x_t = T.reshape(T.slice_axis(x, 1, i, i + 1), (b, -1))
        h = gru_cell(layer, x_t, h)
        steps.append(T.reshape(h, (b, 1, -1)))
    return T.concat(steps, axis=1)


_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "sigmoid": T.sigmoid}


def sequential_forward(net: Network, x: Tensor) -> Tensor:
    """Plain layer chain; activation per layer comes from net.meta."""
    acts = net.meta.get("activations", {})
    for name, layer in net.layers.items():
        if layer.kind == "linear":
            x = linear_forward(layer, x)
        elif layer.kind == "conv1d":
            x = conv_forward(layer, x)
        elif layer.kind == "batchnorm":
            x = batchnorm_forward(layer, x, net.training,
                                  net.meta.get("bn_momentum", 0.1))
        elif layer.kind == "gru":
            x = gru_scan(layer, x)
        act = acts.get(name)
        if act is not None:
            x = _ACTIVATIONS[act](x)
    return x


register_forward("sequential", sequential_forward)


# -- checkpoints ---------------------------------------------------------

_MAGIC = b"ULGA"
_VERSION = 1


def _structure_doc(net: Network) -> dict:
    return {
        "arch": net.arch,
        "meta": net.meta,
        "layers": [
            {
                "name": layer.name,
                "kind": layer.kind,
                "shapes": {p: list(layer.params[p].shape) for p in layer.param_order()},
                "buffer_shapes": {b: list(layer.buffers[b].shape)
                                  for b in layer.buffer_order()},
                "in_source": layer.in_source,
                "dilation": layer.dilation,
                "eps": layer.eps,
            }
            for layer in net.layers.values()
        ],
        "trim_groups": net.trim_groups,
        "protected": sorted(net.protected),
        "pools": {pid: {"kept": p.kept.tolist(), "orig": p.orig}
                  for pid, p in sorted(net.pools.items())},
        "masks": None if net.masks is None else
                 {pid: m.astype(int).tolist() for pid, m in sorted(net.masks.items())},
    }


def checkpoint_bytes(net: Network) -> bytes:
    doc = json.dumps(_structure_doc(net), sort_keys=True,
                     separators=(",", ":")).encode()
    blob = bytearray()
    blob += _MAGIC
    blob += _VERSION.to_bytes(2, "little")
    blob += len(doc).to_bytes(4, "little")
    blob += doc
    for layer in net.layers.values():
        for pname in layer.param_order():
            blob += layer.params[pname].data.astype("<f4").tobytes()
        for bname in layer.buffer_order():
            blob += layer.buffers[bname].astype("<f4").tobytes()
    blob += (zlib.crc32(bytes(blob)) & 0xFFFFFFFF).to_bytes(4, "little")
    return bytes(blob)


def save_checkpoint(net: Network, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14 or raw[:4] != _MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    stored_crc = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError("checkpoint corrupted: crc mismatch")
    version = int.from_bytes(raw[4:6], "little")
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    doc_len = int.from_bytes(raw[6:10], "little")
    doc = json.loads(raw[10 : 10 + doc_len].decode())
    offset = 10 + doc_len
    body = raw[:-4]

    layers = []
    for spec in doc["layers"]:
        params = {}
        for pname in _PARAM_ORDER[spec["kind"]]:
            shape = tuple(spec["shapes"][pname])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += n * 4
            params[pname] = Tensor(arr.copy(), requires_grad=True)
        buffers = {}
        for bname in _BUFFER_ORDER[spec["kind"]]:
            shape = tuple(spec["buffer_shapes"][bname])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += n * 4
            buffers[bname] = arr.copy()
        layers.append(Layer(spec["name"], spec["kind"], params, buffers,
                            spec["in_source"], spec["dilation"], spec["eps"]))
    if offset != len(body):
        raise ValueError("checkpoint corrupted: trailing or missing data")
    net = Network(
        doc["arch"], layers, doc["trim_groups"], doc["protected"], doc["meta"],
        kept_units={pid: np.asarray(p["kept"], dtype=np.int64)
                    for pid, p in doc["pools"].items()},
        orig_units={pid: p["orig"] for pid, p in doc["pools"].items()},
    )
    if doc["masks"] is not None:
        net.masks = {pid: np.asarray(m, dtype=bool) for pid, m in doc["masks"].items()}
    return net
