"""Generator and critic construction, parameter bookkeeping, checkpoints.

The image pair follows the DCGAN shape family: the generator projects a
noise column to 4x4 and doubles the spatial extent per stage
(ConvT -> BN -> ReLU, final stage ConvT -> tanh); the critic halves it per
stage (Conv -> IN -> LeakyReLU) down to 4x4 and ends in a single-channel
4x4 valid conv, one score per sample.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, ShapeError

SUPPORTED_SIZES = (32, 64, 128, 256)


@dataclass
class GeneratorConfig:
    noise_channels: int = 100
    img_channels: int = 1
    target_size: int = 64
    base_features: int = 64

    def validate(self):
        if self.target_size not in SUPPORTED_SIZES:
            raise ConfigError(f"target_size must be one of {SUPPORTED_SIZES}, got {self.target_size}")
        if self.noise_channels < 1 or self.img_channels < 1 or self.base_features < 1:
            raise ConfigError("noise_channels, img_channels and base_features must be positive")


@dataclass
class CriticConfig:
    img_channels: int = 1
    input_size: int = 64
    base_features: int = 64
    leaky_slope: float = 0.2
    in_on_first_layer: bool = False  # raw-intensity stats carry signal; normalizing them away is opt-in

    def validate(self):
        if self.input_size not in SUPPORTED_SIZES:
            raise ConfigError(f"input_size must be one of {SUPPORTED_SIZES}, got {self.input_size}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")


class ParameterStore:
    """Named parameter tensors in a stable order."""

    def __init__(self, items):
        self._items = list(items)
        names = [n for n, _ in self._items]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")

    def names(self):
        return [n for n, _ in self._items]

    def tensors(self):
        return [t for _, t in self._items]

    def items(self):
        return list(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, name):
        for n, t in self._items:
            if n == name:
                return t
        raise KeyError(name)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, in_ch, out_ch, ksize, stride, padding, rng, dtype, init_std=0.02):
        self.stride = stride
        self.padding = padding
        self.weight = ad.Tensor(
            rng.normal(0.0, init_std, (out_ch, in_ch, ksize, ksize)).astype(dtype),
            requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def forward(self, x, training):
        out = ad.conv2d(x, self.weight, self.stride, self.padding)
        return out + ad.reshape(self.bias, (1, self.bias.shape[0], 1, 1))

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []


class ConvTranspose2d:
    def __init__(self, in_ch, out_ch, ksize, stride, padding, rng, dtype, init_std=0.02):
        self.stride = stride
        self.padding = padding
        # kernel layout (in, out, kh, kw): the op is the adjoint of a conv
        # with this same kernel, which maps out_ch -> in_ch
        self.weight = ad.Tensor(
            rng.normal(0.0, init_std, (in_ch, out_ch, ksize, ksize)).astype(dtype),
            requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def forward(self, x, training):
        out = ad.conv_transpose2d(x, self.weight, self.stride, self.padding)
        return out + ad.reshape(self.bias, (1, self.bias.shape[0], 1, 1))

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []


class InstanceNorm2d:
    def __init__(self, channels, dtype, eps=1e-5):
        self.eps = eps
        self.gamma = ad.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x, training):
        return ad.instance_norm2d(x, self.gamma, self.beta, self.eps)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return []


class BatchNorm2d:
    def __init__(self, channels, dtype, eps=1e-5, momentum=0.1):
        self.eps = eps
        self.momentum = momentum
        self.gamma = ad.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running = ad.RunningStats(channels, dtype=dtype)

    def forward(self, x, training):
        mode = "train" if training else "eval"
        return ad.batch_norm2d(x, self.gamma, self.beta, self.eps, mode,
                               self.running, self.momentum)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        flag = np.array([1.0 if self.running.initialized else 0.0], dtype=self.gamma.dtype)
        return [("running_mean", self.running.mean), ("running_var", self.running.var),
                ("running_init", flag)]

    def load_buffers(self, arrays):
        self.running.mean = np.asarray(arrays["running_mean"], dtype=self.gamma.dtype)
        self.running.var = np.asarray(arrays["running_var"], dtype=self.gamma.dtype)
        self.running.initialized = bool(arrays["running_init"][0] > 0.5)


class ReLU:
    def forward(self, x, training):
        return ad.relu(x)

    def params(self):
        return []

    def buffers(self):
        return []


class LeakyReLU:
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x, training):
        return ad.leaky_relu(x, self.slope)

    def params(self):
        return []

    def buffers(self):
        return []


class Tanh:
    def forward(self, x, training):
        return ad.tanh(x)

    def params(self):
        return []

    def buffers(self):
        return []


class Linear:
    def __init__(self, in_dim, out_dim, rng, dtype, init_std=None):
        std = init_std if init_std is not None else np.sqrt(2.0 / in_dim)
        self.weight = ad.Tensor(rng.normal(0.0, std, (in_dim, out_dim)).astype(dtype),
                                requires_grad=True)
        self.bias = ad.Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def forward(self, x, training):
        return ad.matmul(x, self.weight) + self.bias

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def buffers(self):
        return []


class Flatten:
    def forward(self, x, training):
        return ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))

    def params(self):
        return []

    def buffers(self):
        return []


class SqueezeScores:
    """(N, 1, 1, 1) -> (N,): one scalar per sample."""

    def forward(self, x, training):
        if int(np.prod(x.shape[1:])) != 1:
            raise ShapeError(f"expected one element per sample, got shape {x.shape}")
        return ad.reshape(x, (x.shape[0],))

    def params(self):
        return []

    def buffers(self):
        return []


class Network:
    """Ordered stack of layers with named parameters."""

    def __init__(self, named_layers, config, input_shape=None):
        self.layers = list(named_layers)  # (name, layer)
        self.config = config  # JSON-serializable snapshot used by checkpoints
        self.input_shape = input_shape  # trailing dims expected at forward, or None
        self.training = True

    def train(self, mode=True):
        self.training = mode
        return self

    def forward(self, x):
        x = ad.astensor(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(
                f"expected input of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        for _, layer in self.layers:
            x = layer.forward(x, self.training)
        return x

    __call__ = forward

    def parameters(self):
        items = []
        for lname, layer in self.layers:
            for pname, tensor in layer.params():
                items.append((f"{lname}.{pname}", tensor))
        return ParameterStore(items)

    def buffers(self):
        items = []
        for lname, layer in self.layers:
            for bname, arr in layer.buffers():
                items.append((f"{lname}.{bname}", arr))
        return items

    def load_state(self, arrays):
        """Copy parameter/buffer values (by name) into this network."""
        for name, tensor in self.parameters().items():
            if name not in arrays:
                raise FormatError(f"checkpoint missing parameter {name!r}")
            value = np.asarray(arrays[name], dtype=tensor.dtype)
            if value.shape != tensor.shape:
                raise FormatError(f"checkpoint parameter {name!r} has shape {value.shape}, "
                                  f"expected {tensor.shape}")
            tensor.data = value
        for lname, layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                names = ("running_mean", "running_var", "running_init")
                if all(f"{lname}.{n}" in arrays for n in names):
                    layer.load_buffers({n: arrays[f"{lname}.{n}"] for n in names})


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _feature_mult(level):
    return min(2 ** level, 8)


def build_generator(cfg: GeneratorConfig, seed=0, dtype=np.float32):
    """ConvT stack mapping (N, noise_channels, 1, 1) to (N, img_channels, S, S)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    stages = int(np.log2(cfg.target_size)) - 2  # upsampling stages after the 4x4 projection
    bf = cfg.base_features
    layers = []
    ch = bf * _feature_mult(stages - 1)
    layers.append(("project", ConvTranspose2d(cfg.noise_channels, ch, 4, 1, 0, rng, dtype)))
    layers.append(("project_bn", BatchNorm2d(ch, dtype)))
    layers.append(("project_act", ReLU()))
    for i in range(1, stages):
        out_ch = bf * _feature_mult(stages - 1 - i)
        layers.append((f"up{i}", ConvTranspose2d(ch, out_ch, 4, 2, 1, rng, dtype)))
        layers.append((f"up{i}_bn", BatchNorm2d(out_ch, dtype)))
        layers.append((f"up{i}_act", ReLU()))
        ch = out_ch
    layers.append((f"up{stages}", ConvTranspose2d(ch, cfg.img_channels, 4, 2, 1, rng, dtype)))
    layers.append(("out_act", Tanh()))
    config = {"kind": "generator", "seed": seed, **asdict(cfg)}
    return Network(layers, config, input_shape=(cfg.noise_channels, 1, 1))


def build_critic(cfg: CriticConfig, seed=0, dtype=np.float32):
    """Conv stack mapping (N, img_channels, S, S) to N scalar scores."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    stages = int(np.log2(cfg.input_size)) - 2
    bf = cfg.base_features
    layers = []
    ch = cfg.img_channels
    for i in range(stages):
        out_ch = bf * _feature_mult(i)
        layers.append((f"down{i}", Conv2d(ch, out_ch, 4, 2, 1, rng, dtype)))
        if i > 0 or cfg.in_on_first_layer:
            layers.append((f"down{i}_in", InstanceNorm2d(out_ch, dtype)))
        layers.append((f"down{i}_act", LeakyReLU(cfg.leaky_slope)))
        ch = out_ch
    layers.append(("score", Conv2d(ch, 1, 4, 1, 0, rng, dtype)))
    layers.append(("squeeze", SqueezeScores()))
    config = {"kind": "critic", "seed": seed, **asdict(cfg)}
    return Network(layers, config, input_shape=(cfg.img_channels, cfg.input_size, cfg.input_size))


def build_mlp(sizes, seed=0, dtype=np.float64, hidden_slope=0.2, final_bias=0.0,
              init_std=None):
    """Small fully connected net (LeakyReLU hidden layers, linear output);
    used by the 1-D Wasserstein calibration experiments. ``init_std=None``
    picks the fan-in He scale per layer."""
    if len(sizes) < 2:
        raise ConfigError("mlp needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(sizes) - 1):
        layers.append((f"fc{i}", Linear(sizes[i], sizes[i + 1], rng, dtype, init_std=init_std)))
        if i < len(sizes) - 2:
            layers.append((f"fc{i}_act", LeakyReLU(hidden_slope)))
    fc_layers = [layer for _, layer in layers if isinstance(layer, Linear)]
    if final_bias:
        fc_layers[-1].bias.data[...] = final_bias
    config = {"kind": "mlp", "seed": seed, "sizes": list(sizes), "final_bias": final_bias}
    return Network(layers, config, input_shape=(sizes[0],))


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, JSON config, then named float32 arrays
# in stable parameter order followed by buffers
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RSYNCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, network):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    config_bytes = json.dumps(network.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    entries = [(n, t.data) for n, t in network.parameters().items()]
    entries += network.buffers()
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        name_b = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr32.ndim))
        for dim in arr32.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr32.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return (config dict, name -> float32 array)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    config = json.loads(data[off:off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n_items = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n_items, offset=off).reshape(shape)
        off += 4 * n_items
        arrays[name] = arr.copy()
    return config, arrays


def build_from_checkpoint(path, dtype=np.float32):
    """Reconstruct a network from its checkpoint config and load its state."""
    config, arrays = load_checkpoint(path)
    kind = config.get("kind")
    if kind == "generator":
        cfg = GeneratorConfig(**{k: config[k] for k in
                                 ("noise_channels", "img_channels", "target_size", "base_features")})
        net = build_generator(cfg, seed=config.get("seed", 0), dtype=dtype)
    elif kind == "critic":
        cfg = CriticConfig(**{k: config[k] for k in
                              ("img_channels", "input_size", "base_features",
                               "leaky_slope", "in_on_first_layer")})
        net = build_critic(cfg, seed=config.get("seed", 0), dtype=dtype)
    elif kind == "mlp":
        net = build_mlp(config["sizes"], seed=config.get("seed", 0), dtype=dtype,
                        final_bias=config.get("final_bias", 0.0))
    else:
        raise FormatError(f"{path}: unknown network kind {kind!r}")
    net.load_state(arrays)
    return net
