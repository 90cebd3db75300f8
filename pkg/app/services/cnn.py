"""Small convolutional network written directly in numpy.

Layer stack: N conv blocks (same-padded stride-1 convolution, ReLU, 2×2 max
pool), fully connected ReLU layers, and a 2-unit softmax output. Layers are
numbered from 1 in that order; dropout is inverted (train-time mask scaled by
1/keep, identity at inference). Everything runs in float64.

Parameters live in ``Network.params`` under ``conv{i}.W`` (out, in, k, k),
``conv{i}.b``, ``fc{j}.W`` (out, in), ``fc{j}.b``, ``out.W`` and ``out.b``,
in that declaration order.
"""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from app.models.network import Network, NetworkConfig, TrainConfig
from app.services.numerics import max_relative_error

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name → shape, in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    channels = config.input_channels
    for i, block in enumerate(config.conv_blocks, start=1):
        shapes[f"conv{i}.W"] = (block.channels, channels, block.kernel, block.kernel)
        shapes[f"conv{i}.b"] = (block.channels,)
        channels = block.channels
    width = channels * config.final_spatial ** 2
    for j, size in enumerate(config.fc_sizes, start=1):
        shapes[f"fc{j}.W"] = (size, width)
        shapes[f"fc{j}.b"] = (size,)
        width = size
    shapes["out.W"] = (config.n_classes, width)
    shapes["out.b"] = (config.n_classes,)
    return shapes


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Seeded fan-in scaled uniform weights, U(±√(6/fan_in)); zero biases.

    Raises:
        ValueError: "architecture collapses" when pooling shrinks the input below 1 pixel.
    """
    if config.final_spatial < 1:
        raise ValueError(
            f"architecture collapses: {len(config.conv_blocks)} pools on "
            f"{config.input_size}x{config.input_size} input"
        )
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
    network = Network(config=config, params=params)
    logger.debug("Built network with %d parameters (seed=%d)", network.n_parameters, seed)
    return network


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 convolution; returns (output, input windows)."""
    pad = W.shape[2] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, W.shape[2:], axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", windows, W, optimize=True) + b[None, :, None, None]
    return out, windows


def conv_backward(
    dout: np.ndarray, windows: np.ndarray, W: np.ndarray, x_shape: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dW, db) of a same-padded convolution."""
    k = W.shape[2]
    pad = k // 2
    n, c, h, w = x_shape
    dW = np.einsum("nohw,nchwij->ocij", dout, windows, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += np.einsum("nohw,oc->nchw", dout, W[:, :, i, j], optimize=True)
    return dxp[:, :, pad:pad + h, pad:pad + w], dW, db


def pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2×2 stride-2 max pool (odd trailing row/col dropped); returns (output, argmax index)."""
    n, c, h, w = x.shape
    hh, ww = h // 2, w // 2
    blocks = x[:, :, :2 * hh, :2 * ww].reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, hh, ww, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(dout: np.ndarray, idx: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    """Route each output gradient to the argmax position of its window."""
    n, c, h, w = x_shape
    hh, ww = dout.shape[2], dout.shape[3]
    blocks = np.zeros((n, c, hh, ww, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)
    dx = np.zeros(x_shape)
    dx[:, :, :2 * hh, :2 * ww] = blocks
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], p: float) -> np.ndarray:
    keep = 1.0 - p
    return (rng.random(shape) < keep) / keep


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _as_batch(network: Network, batch: np.ndarray) -> np.ndarray:
    config = network.config
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None, :, :]
    expected = (config.input_channels, config.input_size, config.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"batch shape {np.shape(batch)} does not match network input {expected}")
    return x


def _forward(network: Network, x: np.ndarray, train: bool, rng: np.random.Generator | None):
    config, params = network.config, network.params
    cache: list[tuple] = []
    a = x
    layer = 0
    for i, _ in enumerate(config.conv_blocks, start=1):
        layer += 1
        z, windows = conv_forward(a, params[f"conv{i}.W"], params[f"conv{i}.b"])
        r = np.maximum(z, 0.0)
        pooled, idx = pool_forward(r)
        mask = None
        if train and config.dropout.get(layer, 0.0) > 0:
            mask = _dropout_mask(rng, pooled.shape, config.dropout[layer])
            pooled = pooled * mask
        cache.append(("conv", i, a.shape, windows, z, r.shape, idx, mask))
        a = pooled

    a = a.reshape(a.shape[0], -1)
    for j, _ in enumerate(config.fc_sizes, start=1):
        layer += 1
        z = a @ params[f"fc{j}.W"].T + params[f"fc{j}.b"]
        h = np.maximum(z, 0.0)
        mask = None
        if train and config.dropout.get(layer, 0.0) > 0:
            mask = _dropout_mask(rng, h.shape, config.dropout[layer])
            h = h * mask
        cache.append(("fc", j, a, z, mask))
        a = h

    logits = a @ params["out.W"].T + params["out.b"]
    cache.append(("out", a))
    return softmax(logits), cache


def _backward(network: Network, cache: list[tuple], dlogits: np.ndarray) -> dict[str, np.ndarray]:
    params = network.params
    grads: dict[str, np.ndarray] = {}
    _, a_out = cache[-1]
    grads["out.W"] = dlogits.T @ a_out
    grads["out.b"] = dlogits.sum(axis=0)
    da = dlogits @ params["out.W"]

    conv_shape = None
    for entry in reversed(cache[:-1]):
        if entry[0] == "fc":
            _, j, a_in, z, mask = entry
            if mask is not None:
                da = da * mask
            dz = da * (z > 0)
            grads[f"fc{j}.W"] = dz.T @ a_in
            grads[f"fc{j}.b"] = dz.sum(axis=0)
            da = dz @ params[f"fc{j}.W"]
        else:
            _, i, x_shape, windows, z, r_shape, idx, mask = entry
            if conv_shape is None:
                n = da.shape[0]
                conv_shape = (n, z.shape[1], idx.shape[2], idx.shape[3])
                da = da.reshape(conv_shape)
            if mask is not None:
                da = da * mask
            dr = pool_backward(da, idx, r_shape)
            dz = dr * (z > 0)
            da, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = conv_backward(
                dz, windows, params[f"conv{i}.W"], x_shape
            )
    return {name: grads[name] for name in network.params}


def forward(
    network: Network,
    batch: np.ndarray,
    mode: str = "infer",
    seed: int = 0,
    batch_size: int | None = None,
) -> np.ndarray:
    """Class probabilities (n, 2) for a batch of patches.

    ``mode="train"`` applies dropout with masks drawn from ``seed``;
    ``mode="infer"`` is deterministic and may run in chunks of ``batch_size``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _as_batch(network, batch)
    if mode == "train":
        probs, _ = _forward(network, x, True, np.random.default_rng(seed))
        return probs
    step = batch_size or x.shape[0] or 1
    chunks = [_forward(network, x[s:s + step], False, None)[0] for s in range(0, x.shape[0], step)]
    return np.concatenate(chunks) if chunks else np.empty((0, network.config.n_classes))


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 1:
        if np.any((y < 0) | (y >= n_classes)):
            raise ValueError("class labels out of range")
        return np.eye(n_classes)[y.astype(np.int64)]
    if y.ndim != 2 or y.shape[1] != n_classes or not np.all((y == 0) | (y == 1)) \
            or not np.all(y.sum(axis=1) == 1):
        raise ValueError(f"labels must be one-hot over {n_classes} classes")
    return y.astype(np.float64)


def loss_from_probs(probs: np.ndarray, y: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient with respect to the logits.

    mse:  L = mean_n Σ_c (p_c − y_c)²
    xent: L = −mean_n Σ_c y_c log p_c
    """
    n = probs.shape[0]
    if kind == "mse":
        diff = probs - y
        loss = float(np.sum(diff ** 2) / n)
        dp = 2.0 * diff / n
        dlogits = probs * (dp - np.sum(dp * probs, axis=1, keepdims=True))
    elif kind == "xent":
        loss = float(-np.sum(y * np.log(np.clip(probs, 1e-300, None))) / n)
        dlogits = (probs - y) / n
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return loss, dlogits


def loss_and_gradients(
    network: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    train: bool = False,
    seed: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of the batch and the gradient of every parameter (same keys as ``params``).

    ``labels`` may be one-hot rows or class indices. With ``train=True`` the
    dropout masks are drawn from ``seed``.
    """
    x = _as_batch(network, batch)
    y = _one_hot(labels, network.config.n_classes)
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} patches but {y.shape[0]} labels")
    rng = np.random.default_rng(seed) if train else None
    probs, cache = _forward(network, x, train, rng)
    loss, dlogits = loss_from_probs(probs, y, network.config.loss)
    return loss, _backward(network, cache, dlogits)


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

def _batches(n: int, config: TrainConfig, rng: np.random.Generator):
    """Endless stream of index batches; reshuffled on every pass when ``shuffle``."""
    order = rng.permutation(n) if config.shuffle else np.arange(n)
    pos = 0
    while True:
        picked = []
        while len(picked) < config.batch_size:
            if pos == n:
                order = rng.permutation(n) if config.shuffle else np.arange(n)
                pos = 0
            take = min(config.batch_size - len(picked), n - pos)
            picked.extend(order[pos:pos + take])
            pos += take
        yield np.array(picked)


def train(
    network: Network, patches: np.ndarray, labels: np.ndarray, config: TrainConfig
) -> tuple[Network, list[float]]:
    """Mini-batch SGD, w ← w − lr·∇w, one history entry per iteration.

    The input network is left untouched; a trained copy is returned. With
    ``learning_rate=0`` the weights never move; the history is then constant
    only when every iteration sees the same batch under the same forward pass,
    i.e. no dropout, ``shuffle=False`` and ``batch_size`` equal to the number
    of patches.

    Raises:
        ValueError: "degenerate labels" when the patches do not cover both classes.
    """
    y = np.asarray(labels).astype(np.int64)
    if y.ndim != 1 or y.shape[0] != len(patches):
        raise ValueError("labels must be one class index per patch")
    if np.unique(y).size < 2:
        raise ValueError("degenerate labels: training needs patches of both classes")

    net = network.copy()
    rng = np.random.default_rng(config.seed)
    batches = _batches(len(y), config, rng)
    history: list[float] = []
    report_every = max(1, config.iterations // 10)
    for it in range(1, config.iterations + 1):
        idx = next(batches)
        loss, grads = loss_and_gradients(net, patches[idx], y[idx], train=True,
                                         seed=int(rng.integers(0, 2**32)))
        for name, grad in grads.items():
            net.params[name] -= config.learning_rate * grad
        history.append(loss)
        if it % report_every == 0:
            logger.info("Training iteration %d/%d — loss=%.6f", it, config.iterations, loss)
    return net, history


def predict(network: Network, patches: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Class index per patch (argmax probability; ties go to class 0)."""
    return forward(network, patches, mode="infer", batch_size=batch_size).argmax(axis=1)


def accuracy(network: Network, patches: np.ndarray, labels: np.ndarray, batch_size: int = 100) -> float:
    return float(np.mean(predict(network, patches, batch_size) == np.asarray(labels)))


def prepare_patches(pixels: np.ndarray) -> np.ndarray:
    """8-bit hematoxylin patches → float64 in [0, 1] with a channel axis."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    return x[:, None, :, :] if x.ndim == 3 else x


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def gradient_check(
    network: Network,
    batch: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-5,
    n_params: int = 200,
    seed: int = 0,
    floor: float = 1e-4,
) -> tuple[float, int]:
    """Max relative error between backprop and central differences.

    Checks a seeded sample of ``n_params`` parameters (all when fewer) with
    dropout off. Exact zeros in the input are nudged away from the ReLU kink
    first.

    Returns:
        (max relative error, number of parameters checked)
    """
    x = _as_batch(network, batch).copy()
    x[x == 0.0] = 1e-3
    net = network.copy()
    _, grads = loss_and_gradients(net, x, labels)

    index = [(name, i) for name, p in net.params.items() for i in range(p.size)]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(index), size=min(n_params, len(index)), replace=False)
    analytic, numeric = [], []
    for k in np.sort(picks):
        name, i = index[k]
        flat = net.params[name].reshape(-1)
        original = flat[i]
        flat[i] = original + h
        plus, _ = loss_and_gradients(net, x, labels)
        flat[i] = original - h
        minus, _ = loss_and_gradients(net, x, labels)
        flat[i] = original
        analytic.append(grads[name].reshape(-1)[i])
        numeric.append((plus - minus) / (2.0 * h))
    error = max_relative_error(np.array(analytic), np.array(numeric), floor=floor)
    logger.info("Gradient check: %d parameters, max relative error %.3g", len(analytic), error)
    return error, len(analytic)


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

def save_weights(network: Network, path: str | Path) -> Path:
    """Write a JSON header line followed by little-endian float64 arrays in declaration order."""
    header = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "config": network.config.model_dump(mode="json"),
        "layers": [{"name": name, "shape": list(p.shape)} for name, p in network.params.items()],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in network.params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def load_weights(path: str | Path) -> Network:
    """Read a weight file written by ``save_weights``.

    Raises:
        ValueError: unreadable header, a layer whose header shape disagrees
            with the configuration, or a truncated/oversized payload.
    """
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise ValueError(f"weight file {path}: missing header")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
        config = NetworkConfig.model_validate(header["config"])
        layers = header["layers"]
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"weight file {path}: invalid header ({e})") from e
    if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"weight file {path}: unsupported format_version {header.get('format_version')}")

    expected = param_shapes(config)
    names = [layer["name"] for layer in layers]
    if names != list(expected):
        raise ValueError(f"weight file {path}: layers {names} do not match configuration {list(expected)}")
    params = {}
    offset = newline + 1
    for layer in layers:
        name, shape = layer["name"], tuple(layer["shape"])
        if shape != expected[name]:
            raise ValueError(
                f"weight file {path}: layer {name} has shape {shape}, configuration needs {expected[name]}"
            )
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(data):
            raise ValueError(f"weight file {path}: truncated in layer {name}")
        params[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset) \
            .astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"weight file {path}: {len(data) - offset} trailing bytes")
    return Network(config=config, params=params)


def write_loss_log(history: list[float], path: str | Path) -> Path:
    """Training loss per iteration as CSV (iteration, loss)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"iteration": np.arange(1, len(history) + 1), "loss": history})
    frame.to_csv(path, index=False, float_format="%.10g")
    return path
