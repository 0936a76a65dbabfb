"""Binary checkpoint format.

Layout::

    gatedlongrec-checkpoint\\n
    key=value\\n ...          (dims, vocab sizes, hyper-parameters, matrix list)
    end_header\\n
    <matrices>               little-endian float32, row-major, in ModelParams.named() order
    <uint64>                 byte length of everything before it
"""

from __future__ import annotations

import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import HyperParams, ModelParams

MAGIC = b"gatedlongrec-checkpoint\n"
END = b"end_header\n"
FORMAT_VERSION = "1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, hyper: HyperParams, extra: dict | None = None) -> None:
    named = params.named()
    header = {"format_version": FORMAT_VERSION, "num_items": params.num_items, "num_cates": params.num_cates}
    header.update(asdict(hyper))
    header["variant"] = params.variant
    header["matrices"] = ",".join(f"{k}:{t.shape[0]}x{t.shape[1]}" for k, t in named.items())
    for key, value in (extra or {}).items():
        header.setdefault(f"meta.{key}", value)
    body = bytearray(MAGIC)
    for key, value in header.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise CheckpointError(f"header entry {key!r} cannot be serialised")
        body += f"{key}={text}\n".encode("ascii")
    body += END
    for t in named.values():
        body += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    body += struct.pack("<Q", len(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)


def read_header(blob: bytes) -> tuple[dict[str, str], int]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a gatedlongrec checkpoint")
    end = blob.find(END, len(MAGIC))
    if end < 0:
        raise CheckpointError("checkpoint header is not terminated")
    header = {}
    for line in blob[len(MAGIC):end].decode("ascii").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    return header, end + len(END)


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelParams, HyperParams, dict[str, str]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (length,) = struct.unpack("<Q", blob[-8:])
    if length != len(blob) - 8:
        raise CheckpointError(f"{path}: length check failed ({length} != {len(blob) - 8})")
    header, offset = read_header(blob)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    arrays = {}
    for entry in header["matrices"].split(","):
        name, _, shape = entry.partition(":")
        rows, cols = (int(x) for x in shape.split("x"))
        n = rows * cols * 4
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols).astype(dtype)
        offset += n
    if offset != len(blob) - 8:
        raise CheckpointError(f"{path}: {len(blob) - 8 - offset} unexpected trailing bytes")
    hyper = HyperParams(
        M=int(header["M"]), T=int(header["T"]), k=int(header["k"]), Z=int(header["Z"]),
        dropout=float(header["dropout"]), d_e=int(header["d_e"]), d_c=int(header["d_c"]),
        d_s=int(header["d_s"]), d_l=int(header["d_l"]), variant=header["variant"],
    )
    params = ModelParams.from_named(arrays, header["variant"])
    return params, hyper, header
