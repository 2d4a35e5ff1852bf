"""On-disk formats: field files, checkpoints and key-value run configs.

Field file (all integers little-endian)::

    magic     4 bytes   b"FSF1"
    version   u16       1
    level     u8        HEALPix zoom level
    ordering  u8        0 = nested
    name_len  u16       length of the UTF-8 variable name
    name      bytes
    timestamp i64       days since 1940-01-01
    payload   f32[npix(level)]

Checkpoint::

    magic     4 bytes   b"FSCK"
    version   u16       1
    cfg_len   u32       length of the UTF-8 JSON config echo
    cfg       bytes
    n_tensor  u32
    then per tensor: name_len u16, name, ndim u8, dims u32[ndim], f32 payload
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .healpix import check_level, npix

FIELD_MAGIC = b"FSF1"
FIELD_VERSION = 1
CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1
NESTED = 0


class FormatError(Exception):
    """Base class for unreadable files; ``code`` is a stable short name."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class TruncatedError(FormatError):
    code = "truncated"


class UnsupportedError(FormatError):
    code = "unsupported"


@dataclass
class FieldRecord:
    values: np.ndarray
    level: int
    variable: str = ""
    timestamp: int = 0


def write_field(path, values, level, variable="", timestamp=0):
    level = check_level(level)
    values = np.asarray(values, dtype="<f4")
    if values.shape != (npix(level),):
        raise ValueError(f"level {level} needs {npix(level)} values, got shape {values.shape}")
    name = variable.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ValueError("variable name too long")
    header = FIELD_MAGIC + struct.pack("<HBBH", FIELD_VERSION, level, NESTED, len(name))
    with open(path, "wb") as fh:
        fh.write(header + name + struct.pack("<q", int(timestamp)) + values.tobytes())


def read_field(path):
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise BadMagicError(f"{path}: not a field file")
    if len(data) < 10:
        raise TruncatedError(f"{path}: header truncated")
    version, level, ordering, name_len = struct.unpack_from("<HBBH", data, 4)
    if version != FIELD_VERSION:
        raise UnsupportedError(f"{path}: unsupported version {version}")
    if ordering != NESTED:
        raise UnsupportedError(f"{path}: only nested ordering is supported")
    pos = 10 + name_len
    if len(data) < pos + 8:
        raise TruncatedError(f"{path}: header truncated")
    variable = data[10:pos].decode("utf-8")
    (timestamp,) = struct.unpack_from("<q", data, pos)
    pos += 8
    n = npix(level)
    if len(data) - pos != 4 * n:
        cls = TruncatedError if len(data) - pos < 4 * n else FormatError
        raise cls(f"{path}: payload has {len(data) - pos} bytes, expected {4 * n}")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64)
    return FieldRecord(values, level, variable, int(timestamp))


def save_checkpoint(path, config, tensors):
    """Write named arrays (stored as little-endian f32) plus a JSON config echo."""
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return ``(config, tensors)``."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    try:
        version, cfg_len = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise UnsupportedError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        config = json.loads(data[pos:pos + cfg_len].decode("utf-8"))
        pos += cfg_len
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if len(data) < pos + 4 * count:
                raise TruncatedError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).copy()
            pos += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedError(f"{path}: {exc}") from exc
    return config, tensors


def _parse_value(text):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _format_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v) + ("," if len(v) == 1 else "")
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_kv(path):
    """Flat ``dotted.key = value`` document; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def write_kv(path, mapping):
    lines = [f"{k} = {_format_value(v)}" for k, v in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


def _torch_tensors(module):
    return {k: v.detach().cpu().numpy() for k, v in module.named_parameters()}


def _load_parameters(module, tensors, path):
    import torch

    own = dict(module.named_parameters())
    if set(own) != set(tensors):
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        raise FormatError(f"{path}: parameter mismatch (missing {missing[:3]}, extra {extra[:3]})")
    with torch.no_grad():
        for k, p in own.items():
            if tuple(p.shape) != tensors[k].shape:
                raise FormatError(f"{path}: shape mismatch for {k}")
            p.copy_(torch.as_tensor(tensors[k]))


def save_autoencoder(path, est, extra=None):
    """Checkpoint a fitted ``FieldSpaceAutoencoder``; ``extra`` is echoed in the config."""
    cfg = {"kind": "fsae", "params": _jsonable(est.get_params()), **(extra or {})}
    save_checkpoint(path, cfg, _torch_tensors(est.model_))


def load_autoencoder(path):
    """Return ``(estimator, config)``."""
    from .autoencoder import FieldSpaceAutoencoder

    cfg, tensors = load_checkpoint(path)
    if cfg.get("kind") != "fsae":
        raise FormatError(f"{path}: not an autoencoder checkpoint")
    params = dict(cfg["params"])
    params["residual_levels"] = tuple(params["residual_levels"])
    est = FieldSpaceAutoencoder(**params).build()
    _load_parameters(est.model_, tensors, path)
    return est, cfg


def save_diffusion(path, est, extra=None):
    cfg = {"kind": "diffusion", "params": _jsonable(est.get_params()),
           "fitted": {"n_variables": est.n_variables_, "base_level": est.base_level_,
                      "code_level": est.code_level_,
                      **{k: getattr(est, k + "_").tolist()
                         for k in ("base_mean", "base_std", "code_mean", "code_std")}},
           **(extra or {})}
    save_checkpoint(path, cfg, _torch_tensors(est.model_))


def load_diffusion(path):
    from .diffusion import CompressedFieldDiffusion

    cfg, tensors = load_checkpoint(path)
    if cfg.get("kind") != "diffusion":
        raise FormatError(f"{path}: not a diffusion checkpoint")
    est = CompressedFieldDiffusion(**cfg["params"])
    f = cfg["fitted"]
    est.build(f["n_variables"], f["base_level"], f["code_level"])
    for k in ("base_mean", "base_std", "code_mean", "code_std"):
        setattr(est, k + "_", np.asarray(f[k], dtype=np.float64))
    _load_parameters(est.model_, tensors, path)
    return est, cfg
