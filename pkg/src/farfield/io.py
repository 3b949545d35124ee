"""File formats: WAV audio, binary tensor dumps, config trees, key=value reports.

Binary tensor layout (little-endian)::

    offset  size       field
    0       4          magic b"FFTN"
    4       4  uint32  format version (1)
    8       4  uint32  dtype code: 0 float32, 1 complex64 (re/im interleaved),
                       2 float64, 3 complex128
    12      4  uint32  number of dimensions n
    16      8n uint64  dimensions, outermost first
    16+8n   ...        payload, row-major (C order)

Masks are written as float32 with dims (C, T, F); beamformer weights as
complex64 with dims (F, M). float64/complex128 exist for lossless
intermediate dumps.
"""
from __future__ import annotations

import copy
import struct
from pathlib import Path

import numpy as np
import yaml
from scipy.io import wavfile

from .stft import TimeSignal

TENSOR_MAGIC = b"FFTN"
TENSOR_VERSION = 1
_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<c8"),
    2: np.dtype("<f8"),
    3: np.dtype("<c16"),
}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def read_wav(path) -> TimeSignal:
    """Read a PCM-16 or float WAV file, normalising PCM to +-1.0 full scale."""
    sample_rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype.kind == "f":
        data = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype} in {path}")
    if data.ndim == 1:
        data = data[:, None]
    return TimeSignal(data.T, sample_rate)


def write_wav(path, signal: TimeSignal, subtype: str = "float32") -> Path:
    """Write ``signal`` as float32 (default), float64 or pcm16 WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = signal.samples.T
    if subtype == "float32":
        data = x.astype("<f4")
    elif subtype == "float64":
        data = x.astype("<f8")
    elif subtype == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(str(path), signal.sample_rate, data)
    return path


def write_tensor(path, array, dtype=None) -> Path:
    """Dump ``array`` in the documented binary tensor format.

    Real arrays default to float32 and complex arrays to complex64.
    """
    array = np.asarray(array)
    if dtype is None:
        dtype = np.complex64 if np.iscomplexobj(array) else np.float32
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in _CODES:
        raise ValueError(f"unsupported tensor dtype {dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = TENSOR_MAGIC + struct.pack("<III", TENSOR_VERSION, _CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return path


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path} is not a tensor file (bad magic)")
    version, code, ndim = struct.unpack_from("<III", raw, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 16)
    offset = 16 + 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match header dims {shape}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def load_config(path) -> dict:
    """Load a YAML (or JSON) config tree."""
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return tree


def apply_overrides(tree: dict, overrides) -> dict:
    """Return a copy of ``tree`` with ``dotted.key=value`` overrides applied.

    Values are parsed as YAML scalars, so ``wpe.taps=5`` sets an int and
    ``stages.wpe=false`` a bool.
    """
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"bad override key {key!r}")
        node = tree
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r} descends into non-mapping {part!r}")
            node = child
        node[parts[-1]] = _parse_scalar(value)
    return tree


def write_report(path, values: dict) -> Path:
    """Write a flat ``key=value`` report, one entry per line, sorted by key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_format_value(values[key])}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, value = line.split("=", 1)
        out[key] = _parse_scalar(value)
    return out


def _parse_scalar(text):
    # YAML 1.1 reads "1e-17" as a string, so try the numeric forms first
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def _format_value(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def format_table(values: dict) -> str:
    width = max((len(k) for k in values), default=0)
    rows = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, (float, np.floating)):
            value = f"{float(value):10.3f}"
        rows.append(f"{key:<{width}}  {value}")
    return "\n".join(rows)


def save_mask_images(directory, masks, prefix: str = "mask") -> list[Path]:
    """Write one PNG heatmap per class (frequency on the vertical axis)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, mask in enumerate(np.asarray(masks)):
        path = directory / f"{prefix}_{c}.png"
        plt.imsave(path, mask.T[::-1], cmap="viridis", vmin=0.0, vmax=1.0)
        paths.append(path)
    return paths
