"""The embedding network: 48x48 grayscale image -> k-dimensional vector.

Layer sequence (default channel plan)::

    conv 5x5 1->32, PReLU, maxpool   48 -> 44 -> 22
    conv 5x5 32->64, PReLU, maxpool  22 -> 18 -> 9
    flatten 64*9*9 = 5184
    linear 5184->256, PReLU
    linear 256->64, PReLU
    linear 64->k

The optional classifier head (PReLU on the embedding, then linear to the
joint classes) is only used when training in classical mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import struct

import numpy as np

from . import kernels as K

INPUT_SIZE = 48
KERNEL = 5
DEFAULT_CHANNELS = (32, 64)
DEFAULT_HIDDEN = (256, 64)
DEFAULT_K = 8
PRELU_INIT = 0.25

MAGIC = b"JEMB"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """Base class for unreadable model files."""


class CorruptModelError(ModelFileError):
    pass


class TruncatedModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class BackwardError(RuntimeError):
    """Raised when ``backward`` is called without a cached forward pass."""


@dataclass
class ClassifierHead:
    slopes: np.ndarray  # (k,)
    w: np.ndarray  # (n_classes, k)
    b: np.ndarray  # (n_classes,)

    @property
    def n_classes(self):
        return self.w.shape[0]

    def arrays(self):
        return {"head.slopes": self.slopes, "head.w": self.w, "head.b": self.b}


@dataclass
class ModelParams:
    layers: dict = field(default_factory=dict)
    head: ClassifierHead | None = None

    @property
    def k(self):
        return self.layers["fc3.b"].shape[0]

    @property
    def channels(self):
        return (self.layers["conv1.w"].shape[0], self.layers["conv2.w"].shape[0])

    @property
    def hidden(self):
        return (self.layers["fc1.b"].shape[0], self.layers["fc2.b"].shape[0])

    def arrays(self):
        out = dict(self.layers)
        if self.head is not None:
            out.update(self.head.arrays())
        return out

    def copy(self):
        head = None
        if self.head is not None:
            head = ClassifierHead(self.head.slopes.copy(), self.head.w.copy(), self.head.b.copy())
        return ModelParams({n: a.copy() for n, a in self.layers.items()}, head)


def flat_features(channels=DEFAULT_CHANNELS):
    side = ((INPUT_SIZE - KERNEL + 1) // 2 - KERNEL + 1) // 2
    return channels[1] * side * side


def layer_shapes(k=DEFAULT_K, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN):
    c1, c2 = channels
    h1, h2 = hidden
    return {
        "conv1.w": (c1, 1, KERNEL, KERNEL), "conv1.b": (c1,), "conv1.a": (c1,),
        "conv2.w": (c2, c1, KERNEL, KERNEL), "conv2.b": (c2,), "conv2.a": (c2,),
        "fc1.w": (h1, flat_features(channels)), "fc1.b": (h1,), "fc1.a": (h1,),
        "fc2.w": (h2, h1), "fc2.b": (h2,), "fc2.a": (h2,),
        "fc3.w": (k, h2), "fc3.b": (k,),
    }


def _uniform_fan_in(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(k=DEFAULT_K, seed=0, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN):
    """Fan-in uniform weights, zero biases, PReLU slopes at 0.25."""
    if k < 1:
        raise ValueError(f"embedding dimension must be positive, got {k}")
    rng = np.random.default_rng(seed)
    layers = {}
    for name, shape in layer_shapes(k, channels, hidden).items():
        kind = name.split(".")[1]
        if kind == "w":
            layers[name] = _uniform_fan_in(rng, shape)
        elif kind == "a":
            layers[name] = np.full(shape, PRELU_INIT)
        else:
            layers[name] = np.zeros(shape)
    return ModelParams(layers)


def init_head(k, n_classes, seed=0):
    rng = np.random.default_rng(seed)
    return ClassifierHead(np.full(k, PRELU_INIT), _uniform_fan_in(rng, (n_classes, k)),
                          np.zeros(n_classes))


# -- forward / backward ---------------------------------------------------------

def _check_images(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, INPUT_SIZE, INPUT_SIZE):
        raise K.ShapeError(f"expected {INPUT_SIZE}x{INPUT_SIZE} single-channel images, "
                           f"got array of shape {x.shape}")
    return x


def forward(params, images):
    """Embed a batch of images; returns ``(embeddings, cache)``.

    ``images`` may be (48, 48), (N, 48, 48) or (N, 1, 48, 48).
    """
    L = params.layers
    x = _check_images(images)
    c = {"x": x}
    c["z1"], c["cols1"] = K.conv2d(x, L["conv1.w"], L["conv1.b"], return_cols=True)
    a1 = K.prelu(c["z1"], L["conv1.a"])
    p1, c["i1"] = K.maxpool2(a1)
    c["p1"] = p1
    c["z2"], c["cols2"] = K.conv2d(p1, L["conv2.w"], L["conv2.b"], return_cols=True)
    a2 = K.prelu(c["z2"], L["conv2.a"])
    p2, c["i2"] = K.maxpool2(a2)
    c["f0"] = p2.reshape(p2.shape[0], -1)
    c["z3"] = K.linear(c["f0"], L["fc1.w"], L["fc1.b"])
    c["f1"] = K.prelu(c["z3"], L["fc1.a"])
    c["z4"] = K.linear(c["f1"], L["fc2.w"], L["fc2.b"])
    c["f2"] = K.prelu(c["z4"], L["fc2.a"])
    out = K.linear(c["f2"], L["fc3.w"], L["fc3.b"])
    return out, c


def backward(params, cache, dout):
    """Reverse pass; returns a dict of gradients keyed like ``params.layers``."""
    if cache is None:
        raise BackwardError("backward called without a cached forward pass")
    L = params.layers
    g = {}
    dout = np.atleast_2d(dout)
    df2, g["fc3.w"], g["fc3.b"] = K.linear_backward(dout, cache["f2"], L["fc3.w"])
    dz4, g["fc2.a"] = K.prelu_backward(df2, cache["z4"], L["fc2.a"])
    df1, g["fc2.w"], g["fc2.b"] = K.linear_backward(dz4, cache["f1"], L["fc2.w"])
    dz3, g["fc1.a"] = K.prelu_backward(df1, cache["z3"], L["fc1.a"])
    df0, g["fc1.w"], g["fc1.b"] = K.linear_backward(dz3, cache["f0"], L["fc1.w"])
    z2 = cache["z2"]
    dp2 = df0.reshape(z2.shape[0], z2.shape[1], z2.shape[2] // 2, z2.shape[3] // 2)
    da2 = K.maxpool2_backward(dp2, cache["i2"])
    dz2, g["conv2.a"] = K.prelu_backward(da2, z2, L["conv2.a"])
    dp1, g["conv2.w"], g["conv2.b"] = K.conv2d_backward(dz2, cache["p1"], L["conv2.w"],
                                                         cols=cache["cols2"])
    da1 = K.maxpool2_backward(dp1, cache["i1"])
    dz1, g["conv1.a"] = K.prelu_backward(da1, cache["z1"], L["conv1.a"])
    _, g["conv1.w"], g["conv1.b"] = K.conv2d_backward(dz1, cache["x"], L["conv1.w"],
                                                      need_dx=False, cols=cache["cols1"])
    return g


def embed(image, params):
    """Embedding of a single 48x48 image in [0, 1]; a length-k vector."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (INPUT_SIZE, INPUT_SIZE):
        raise K.ShapeError(f"embed expects a {INPUT_SIZE}x{INPUT_SIZE} image, got {image.shape}")
    out, _ = forward(params, image)
    return out[0]


def embed_batch(images, params, chunk=64):
    images = np.asarray(images, dtype=np.float64)
    parts = [forward(params, images[i:i + chunk])[0] for i in range(0, len(images), chunk)]
    if not parts:
        return np.zeros((0, params.k))
    return np.concatenate(parts)


# -- classifier head ------------------------------------------------------------

def head_logits(head, emb):
    emb = np.atleast_2d(emb)
    if emb.shape[1] != head.w.shape[1]:
        raise K.ShapeError(f"head expects {head.w.shape[1]}-d embeddings, got {emb.shape[1]}")
    act = K.prelu(emb, head.slopes)
    return K.linear(act, head.w, head.b)


def head_backward(head, emb, dlogits):
    """Returns ``(demb, grads)`` with grads keyed ``head.*``."""
    emb = np.atleast_2d(emb)
    act = K.prelu(emb, head.slopes)
    dact, dw, db = K.linear_backward(dlogits, act, head.w)
    demb, da = K.prelu_backward(dact, emb, head.slopes)
    return demb, {"head.slopes": da, "head.w": dw, "head.b": db}


def classify(emb, head, n_classes=None):
    """Class probabilities for one embedding (or a batch)."""
    if n_classes is not None and head.n_classes != n_classes:
        raise K.ShapeError(f"head has {head.n_classes} outputs but {n_classes} classes expected")
    emb = np.asarray(emb, dtype=np.float64)
    probs = K.softmax(head_logits(head, emb))
    return probs[0] if emb.ndim == 1 else probs


# -- serialization --------------------------------------------------------------

def save_model(params, path):
    """Write ``params`` (and its head, if any) as a little-endian JEMB file."""
    arrays = params.arrays()
    header = [MAGIC, struct.pack("<III", FORMAT_VERSION, params.k, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values()]
    with open(path, "wb") as fh:
        fh.write(b"".join(header + body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedModelError(
                f"model file truncated: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CorruptModelError(f"{path}: bad magic, not a JEMB model file")
    version, k, n_blocks = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    table = []
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptModelError(f"{path}: undecodable block name") from exc
        (ndim,) = r.unpack("<I")
        table.append((name, r.unpack(f"<{ndim}I")))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.buf):
        raise CorruptModelError(f"{path}: {len(r.buf) - r.pos} trailing bytes")

    head_arrays = {n: a for n, a in arrays.items() if n.startswith("head.")}
    layers = {n: a for n, a in arrays.items() if not n.startswith("head.")}
    try:
        channels = (layers["conv1.w"].shape[0], layers["conv2.w"].shape[0])
        hidden = (layers["fc1.b"].shape[0], layers["fc2.b"].shape[0])
    except KeyError as exc:
        raise CorruptModelError(f"{path}: missing layer {exc}") from exc
    expected = layer_shapes(k, channels, hidden)
    got = {n: a.shape for n, a in layers.items()}
    if got != expected:
        raise CorruptModelError(f"{path}: layer table {got} inconsistent with k={k}")
    head = None
    if head_arrays:
        try:
            head = ClassifierHead(head_arrays["head.slopes"], head_arrays["head.w"],
                                  head_arrays["head.b"])
        except KeyError as exc:
            raise CorruptModelError(f"{path}: incomplete classifier head") from exc
        if head.slopes.shape != (k,) or head.w.shape[1:] != (k,) \
                or head.b.shape != head.w.shape[:1]:
            raise CorruptModelError(f"{path}: classifier head shapes inconsistent with k={k}")
    return ModelParams({n: layers[n] for n in expected}, head)
