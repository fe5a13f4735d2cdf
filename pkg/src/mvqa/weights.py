"""Portable weight checkpoints.

Layout: a 4-byte magic, a 4-byte little-endian version, an 8-byte
little-endian manifest length, the UTF-8 JSON manifest, then the raw
little-endian tensor payload.  The manifest lists every tensor's name,
shape, dtype, byte offset, and byte count, plus a free-form "meta" object
(config, vocabularies, optimizer constants) sufficient to rebuild the model.
Writes go to a temporary file and are renamed into place, so a crashed save
never leaves a half-written checkpoint behind.
"""

import json
import os
import struct

import numpy as np

MAGIC = b"MVQW"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class WeightFormatError(Exception):
    pass


class CorruptWeightsError(WeightFormatError):
    pass


class SchemaError(WeightFormatError):
    pass


def write_checkpoint(params, path, meta=None):
    """Serialize named tensors plus metadata; atomic on POSIX renames."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in params.items():
        dtype_name = tensor.data.dtype.name
        if dtype_name not in _DTYPES:
            raise WeightFormatError(f"{name}: unsupported dtype {dtype_name}")
        blob = np.ascontiguousarray(tensor.data).astype(_DTYPES[dtype_name]).tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "dtype": dtype_name,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"tensors": entries, "meta": meta or {}}
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp_path, path)


def read_checkpoint(path):
    """Return ``(tensors, meta)`` where tensors maps names to arrays."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise WeightFormatError(f"{path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise WeightFormatError(f"{path}: not a weight checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    (manifest_len,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + manifest_len
    if len(raw) < header_end:
        raise CorruptWeightsError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptWeightsError(f"{path}: manifest unreadable: {exc}") from exc
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise CorruptWeightsError(f"{path}: manifest missing tensor table")
    payload = raw[header_end:]
    expected = 0
    for entry in manifest["tensors"]:
        expected = max(expected, entry["offset"] + entry["nbytes"])
    if len(payload) != expected:
        raise CorruptWeightsError(
            f"{path}: payload holds {len(payload)} bytes, manifest expects {expected}")
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if entry["dtype"] not in _DTYPES:
            raise SchemaError(f"{path}: {name}: unknown dtype {entry['dtype']}")
        if name in tensors:
            raise SchemaError(f"{path}: duplicate tensor name {name}")
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise CorruptWeightsError(
                f"{path}: {name}: {arr.size} values cannot fill shape {shape}")
        tensors[name] = arr.reshape(shape).astype(entry["dtype"], copy=True)
    return tensors, manifest.get("meta", {})


def save_model(model, path, extra_meta=None):
    """Checkpoint a model with everything needed to rebuild it."""
    from .optim import CONSTANTS

    meta = {
        "config": model.config.to_dict(),
        "question_vocab": model.question_vocab.to_list(),
        "answer_vocab": model.answer_vocab.to_dict(),
        "dtype": model.dtype.name,
        "optimizer": dict(CONSTANTS),
    }
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(model.parameters(), path, meta)


def restore_model_weights(model, path):
    """Copy checkpoint tensors into an existing model, name for name."""
    tensors, meta = read_checkpoint(path)
    params = model.parameters()
    missing = sorted(set(params) - set(tensors))
    unknown = sorted(set(tensors) - set(params))
    if missing or unknown:
        problems = []
        if missing:
            problems.append(f"missing tensors: {', '.join(missing)}")
        if unknown:
            problems.append(f"unknown tensors: {', '.join(unknown)}")
        raise SchemaError(f"{path}: {'; '.join(problems)}")
    for name, tensor in params.items():
        arr = tensors[name]
        if arr.shape != tensor.data.shape:
            raise SchemaError(
                f"{path}: {name}: checkpoint shape {arr.shape} does not match "
                f"model shape {tensor.data.shape}")
    # all checks passed; only now mutate the model
    for name, tensor in params.items():
        tensor.data = tensors[name].astype(tensor.data.dtype, copy=True)
    return meta


def load_model(path):
    """Rebuild a model entirely from a checkpoint."""
    from .config import TrainConfig
    from .data import AnswerVocabulary
    from .encoders import Vocabulary
    from .model import VqaModel

    tensors, meta = read_checkpoint(path)
    for key in ("config", "question_vocab", "answer_vocab"):
        if key not in meta:
            raise SchemaError(f"{path}: checkpoint metadata lacks {key!r}")
    config = TrainConfig.from_dict(meta["config"])
    question_vocab = Vocabulary.from_list(meta["question_vocab"])
    answer_vocab = AnswerVocabulary.from_dict(meta["answer_vocab"])
    model = VqaModel(config, question_vocab, answer_vocab,
                     dtype=np.dtype(meta.get("dtype", "float32")))
    restore_model_weights(model, path)
    return model
