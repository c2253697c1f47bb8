"""SE3-Net and its baselines.

Architecture (desk scale): a strided conv encoder on the 3-channel cloud and a
two-layer fully connected encoder on the action are concatenated (late
fusion). The mask decoder maps the joint code back to the input resolution
with deconvolutions, adding the encoder feature maps at matching resolution
(skip-add). The SE3 decoder is a small fully connected head emitting an
axis-angle rotation and a translation per motion class, initialized to the
identity transform.
"""

import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .layers import SharpeningSchedule, hard_assign, normalize_masks, sharpen_masks, transform_layer

VARIANTS = ("se3net", "se3net_no_penalty", "flow", "no_motion")
_VARIANT_ALIASES = {"no_penalty": "se3net_no_penalty"}

CONV_KERNEL = 3
DECONV_KERNEL = 4
PRELU_INIT = 0.25


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def canonical_variant(name):
    name = _VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass
class ModelConfig:
    k: int = 3
    n: int = 10
    height: int = 32
    width: int = 40
    conv_channels: tuple = (8, 16)
    latent: int = 64
    action_hidden: int = 32
    se3_hidden: int = 64
    variant: str = "se3net"
    seed: int = 0
    scale_divisor: float = 1.0
    skip_add: bool = True
    batch_norm: bool = False

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.variant = canonical_variant(self.variant)
        if self.batch_norm:
            raise ConfigError("batch normalization is not supported")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n < 1:
            raise ConfigError("action dimension n must be >= 1")
        factor = 2 ** len(self.conv_channels)
        if not self.conv_channels or self.height % factor or self.width % factor:
            raise ConfigError(f"grid {self.height}x{self.width} must be divisible by {factor}")
        if self.scale_divisor <= 0:
            raise ConfigError("scale_divisor must be positive")

    @property
    def bottleneck(self):
        factor = 2 ** len(self.conv_channels)
        return self.conv_channels[-1], self.height // factor, self.width // factor

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


class NetworkParams:
    """Named learnable tensors in a fixed order."""

    def __init__(self, tensors=None):
        self._tensors = OrderedDict(tensors or {})

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, value):
        self._tensors[name] = value if isinstance(value, T.Tensor) else T.Tensor(value, requires_grad=True)

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def count(self):
        return int(sum(t.data.size for t in self._tensors.values()))

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def flat(self):
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._tensors.values()])

    def flat_grad(self):
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([np.zeros(t.data.size) if t.grad is None else t.grad.ravel()
                               for t in self._tensors.values()])

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.count():
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.count()}")
        offset = 0
        for t in self._tensors.values():
            n = t.data.size
            t.data[...] = vec[offset:offset + n].reshape(t.shape)
            offset += n

    def copy(self):
        return NetworkParams({k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.items()})


class Prediction(NamedTuple):
    cloud: T.Tensor
    masks: T.Tensor = None
    rotations: T.Tensor = None
    translations: T.Tensor = None
    flow: T.Tensor = None


# ------------------------------------------------------------ construction


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config):
    """Seeded parameter initialization for the configured variant."""
    cfg = config
    if cfg.variant == "no_motion":
        return NetworkParams()
    rng = np.random.default_rng(cfg.seed)
    p = NetworkParams()

    def dense(name, n_in, n_out, zero=False, act=True):
        p[f"{name}.w"] = np.zeros((n_in, n_out)) if zero else _uniform(rng, (n_in, n_out), n_in)
        p[f"{name}.b"] = np.zeros(n_out) if zero else _uniform(rng, n_out, n_in)
        if act:
            p[f"{name}.slope"] = np.full(n_out, PRELU_INIT)

    c_in = 3
    for i, c_out in enumerate(cfg.conv_channels):
        fan = c_in * CONV_KERNEL ** 2
        p[f"enc.conv{i}.w"] = _uniform(rng, (c_out, c_in, CONV_KERNEL, CONV_KERNEL), fan)
        p[f"enc.conv{i}.b"] = _uniform(rng, c_out, fan)
        p[f"enc.conv{i}.slope"] = np.full(c_out, PRELU_INIT)
        c_in = c_out
    bc, bh, bw = cfg.bottleneck
    flat = bc * bh * bw
    dense("enc.fc", flat, cfg.latent)
    dense("act.fc0", cfg.n, cfg.action_hidden)
    dense("act.fc1", cfg.action_hidden, cfg.action_hidden)
    joint = cfg.latent + cfg.action_hidden

    dense("dec.fc", joint, flat)
    is_flow = cfg.variant == "flow"
    out_channels = 3 if is_flow else cfg.k
    chans = list(cfg.conv_channels[::-1]) + [out_channels]
    n_stages = len(cfg.conv_channels)
    for i in range(n_stages):
        last = i == n_stages - 1
        fan = chans[i] * DECONV_KERNEL ** 2
        shape = (chans[i], chans[i + 1], DECONV_KERNEL, DECONV_KERNEL)
        zero = last and is_flow
        p[f"dec.deconv{i}.w"] = np.zeros(shape) if zero else _uniform(rng, shape, fan)
        p[f"dec.deconv{i}.b"] = np.zeros(chans[i + 1]) if zero else _uniform(rng, chans[i + 1], fan)
        if not last:
            p[f"dec.deconv{i}.slope"] = np.full(chans[i + 1], PRELU_INIT)

    if not is_flow:
        dense("se3.fc0", joint, cfg.se3_hidden)
        # Zero output layer: every class starts at the identity transform.
        dense("se3.fc1", cfg.se3_hidden, 6 * cfg.k, zero=True, act=False)
    return p


# ---------------------------------------------------------------- networks


def _batched(x, u):
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    u = u if isinstance(u, T.Tensor) else T.Tensor(u)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
        u = u.reshape((1, -1))
    return x, u, single


class _ConvEncoderDecoder:
    def __init__(self, config, params=None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def _dense(self, name, x, act=True):
        p = self.params
        y = T.linear(x, p[f"{name}.w"], p[f"{name}.b"])
        return T.prelu(y, p[f"{name}.slope"]) if act else y

    def _check_inputs(self, x, u):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (3, cfg.height, cfg.width):
            raise ConfigError(f"cloud shape {x.shape} does not match grid 3x{cfg.height}x{cfg.width}")
        if u.ndim != 2 or u.shape != (x.shape[0], cfg.n):
            raise ConfigError(f"action shape {u.shape} does not match n={cfg.n}")

    def encode(self, x, u):
        """Joint latent code plus the per-stage conv feature maps."""
        cfg, p = self.config, self.params
        x, u, _ = _batched(x, u)
        self._check_inputs(x, u)
        h = T.scale(x, 1.0 / cfg.scale_divisor) if cfg.scale_divisor != 1.0 else x
        skips = []
        for i in range(len(cfg.conv_channels)):
            h = T.conv2d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=2, pad=1)
            h = T.prelu(h, p[f"enc.conv{i}.slope"])
            skips.append(h)
        code = self._dense("enc.fc", h.reshape((x.shape[0], -1)))
        a = self._dense("act.fc1", self._dense("act.fc0", u))
        return T.concat([code, a], axis=1), skips

    def _decode_dense(self, latent, skips, skip_add=None):
        cfg, p = self.config, self.params
        skip_add = cfg.skip_add if skip_add is None else skip_add
        n = latent.shape[0]
        h = self._dense("dec.fc", latent).reshape((n,) + cfg.bottleneck)
        n_stages = len(cfg.conv_channels)
        for i in range(n_stages):
            if skip_add:
                h = T.add(h, skips[n_stages - 1 - i])
            h = T.deconv2d(h, p[f"dec.deconv{i}.w"], p[f"dec.deconv{i}.b"], stride=2, pad=1)
            if i < n_stages - 1:
                h = T.prelu(h, p[f"dec.deconv{i}.slope"])
        return h


class SE3Net(_ConvEncoderDecoder):
    """Masks plus ``k`` rigid transforms, blended by the transform layer."""

    def __init__(self, config, params=None, schedule=None):
        if config.variant not in ("se3net", "se3net_no_penalty"):
            raise ConfigError(f"SE3Net cannot run variant {config.variant!r}")
        super().__init__(config, params)
        self.schedule = schedule if schedule is not None else SharpeningSchedule()

    @property
    def sharpens(self):
        return self.config.variant == "se3net"

    def decode_masks(self, latent, skips, skip_add=None):
        return normalize_masks(self._decode_dense(latent, skips, skip_add))

    def decode_se3(self, latent):
        n, k = latent.shape[0], self.config.k
        hidden = self._dense("se3.fc0", latent)
        params = self._dense("se3.fc1", hidden, act=False).reshape((n, k, 6))
        return params[:, :, :3], params[:, :, 3:]

    def forward(self, x, u, epoch=0, mode="eval", rng_seed=0, hard=False, skip_add=None):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x, u, single = _batched(x, u)
        latent, skips = self.encode(x, u)
        masks = self.decode_masks(latent, skips, skip_add)
        if self.sharpens:
            masks = sharpen_masks(masks, self.schedule, epoch, rng_seed, train_mode=(mode == "train"))
        if hard:
            masks = T.Tensor(hard_assign(masks)[1])
        rot, trans = self.decode_se3(latent)
        y = transform_layer(x, masks, rot, trans)
        if single:
            return Prediction(y.reshape(y.shape[1:]), masks.reshape(masks.shape[1:]),
                              rot.reshape(rot.shape[1:]), trans.reshape(trans.shape[1:]))
        return Prediction(y, masks, rot, trans)


class FlowNet(_ConvEncoderDecoder):
    """Same encoder/decoder predicting dense 3-D flow; prediction = input + flow."""

    def __init__(self, config, params=None, schedule=None):
        if config.variant != "flow":
            raise ConfigError(f"FlowNet cannot run variant {config.variant!r}")
        super().__init__(config, params)

    def flow_forward(self, x, u):
        x, u, single = _batched(x, u)
        latent, skips = self.encode(x, u)
        flow = self._decode_dense(latent, skips)
        if single:
            flow = flow.reshape(flow.shape[1:])
        return flow

    def forward(self, x, u, epoch=0, mode="eval", rng_seed=0, hard=False, skip_add=None):
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        flow = self.flow_forward(x, u)
        return Prediction(T.add(x, flow), flow=flow)


class NoMotion:
    """Always predicts zero motion."""

    def __init__(self, config, params=None, schedule=None):
        self.config = config
        self.params = NetworkParams()

    def forward(self, x, u=None, epoch=0, mode="eval", rng_seed=0, hard=False, skip_add=None):
        return Prediction(no_motion_forward(x))


def no_motion_forward(x):
    return x if isinstance(x, T.Tensor) else T.Tensor(x)


def build_model(config, params=None, schedule=None):
    cls = {"se3net": SE3Net, "se3net_no_penalty": SE3Net, "flow": FlowNet, "no_motion": NoMotion}[config.variant]
    return cls(config, params, schedule)


# -------------------------------------------------------------- checkpoint

_MAGIC = b"SE3NETS-CHECKPOINT v1\n"


def save_checkpoint(path, model, epoch=0, extra=None):
    """Text header (config, seed, epoch, array table) followed by raw float64 LE arrays."""
    schedule = getattr(model, "schedule", None)
    header = {
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "epoch": int(epoch),
        "schedule": asdict(schedule) if schedule is not None else None,
        "arrays": [{"name": name, "shape": list(t.shape)} for name, t in model.params.items()],
        "extra": extra or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(f"{len(text)}\n".encode("ascii"))
    buf.write(text)
    buf.write(b"\n")
    for _, t in model.params.items():
        buf.write(t.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, header)``; arrays are restored bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    nl = raw.find(b"\n", pos)
    try:
        hlen = int(raw[pos:nl])
        header = json.loads(raw[nl + 1:nl + 1 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    pos = nl + 1 + hlen + 1
    cfg_dict = dict(header["config"])
    config = ModelConfig(**cfg_dict)
    arrays = OrderedDict()
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at array {entry['name']!r}")
        arrays[entry["name"]] = T.Tensor(np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos)
                                         .reshape(shape).astype(np.float64), requires_grad=True)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    sched = header.get("schedule")
    schedule = SharpeningSchedule(**sched) if sched else None
    model = build_model(config, NetworkParams(arrays), schedule)
    return model, header
