"""Single-file checkpoint format.

Layout (all integers little-endian)::

    bytes 0..15   magic b"ATTNLINK-CKPT-1\\n"
    bytes 16..23  uint64 header length H
    next H bytes  UTF-8 JSON header, keys sorted
    rest          float64 little-endian payload

The header records ``model_config``, ``train_config``, ``seed``, ``step``,
``vocab`` (``src``/``tgt`` token lists including the reserved tokens),
``extra`` and ``tensors``: a list of ``{"name", "group", "shape",
"offset"}`` where ``group`` is ``param``, ``adam_m`` or ``adam_v`` and
``offset`` counts float64 elements from the start of the payload. Each
tensor is stored row-major. The same inputs always produce the same bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"ATTNLINK-CKPT-1\n"
GROUPS = ("param", "adam_m", "adam_v")


def save_checkpoint(path, *, model_config, train_config, seed, step, params, adam_m=None, adam_v=None, vocab=None, extra=None):
    """Write a checkpoint. ``params``/``adam_m``/``adam_v`` map names to arrays."""
    entries = []
    blobs = []
    offset = 0
    for group, tensors in zip(GROUPS, (params, adam_m or {}, adam_v or {})):
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.size
    header = {
        "format": 1,
        "model_config": model_config,
        "train_config": train_config,
        "seed": seed,
        "step": step,
        "vocab": vocab,
        "extra": extra or {},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(header, {group: {name: array}})``."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise InputError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", buf, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(buf, dtype="<f8", offset=start + hlen)
    groups = {g: {} for g in GROUPS}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = payload[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr
    return header, groups


def load_model(path):
    """Rebuild ``(model_config, params, (src_vocab, tgt_vocab), header)`` from a checkpoint."""
    from .data import Vocab
    from .model import ModelConfig, ModelParams, param_shapes
    from .tensor import Tensor

    header, groups = load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"]).validate()
    expected = param_shapes(cfg)
    got = groups["param"]
    if list(got) != list(expected) or any(got[k].shape != tuple(expected[k][0]) for k in got):
        raise InputError(f"{path}: parameters do not match the stored model config")
    params = ModelParams({k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in got.items()})
    vocab = header.get("vocab") or {}
    if "src" not in vocab or "tgt" not in vocab:
        raise InputError(f"{path}: checkpoint carries no vocabulary")
    vocabs = (Vocab(vocab["src"]), Vocab(vocab["tgt"]))
    return cfg, params, vocabs, header
