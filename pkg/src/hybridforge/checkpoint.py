"""Binary container for named tensors plus a JSON footer, and model persistence.

Layout (all integers little-endian):
    magic "HYBF" | version u16 | n_tensors u32
    per tensor: name_len u16, name utf-8, dtype code u8, rank u8,
                dims u32 x rank, raw row-major payload
    footer: meta_len u32, canonical JSON utf-8
    crc32 u32 over every preceding byte

The JSON footer carries per-layer attention-kind tags and the model config for
model files; round-trips are byte-identical because tensor order and JSON key
order are canonical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .errors import FormatError
from .linear_attn import LinearBlockWeights, VARIANTS
from .model import FULL, FullAttnWeights, Layer, MlpWeights, Model, ModelConfig
from .tensor import Parameter

MAGIC = b"HYBF"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.int32): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _canonical_json(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")  # keeps rank-0, unlike ascontiguousarray
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:32]!r}...")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    mb = _canonical_json(meta)
    parts.append(struct.pack("<I", len(mb)))
    parts.append(mb)
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", offset=self.off)
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u(self, fmt: str, what: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def read_container(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) + 2 + 4 + 4 + 4:
        raise FormatError("file too short to be a container", offset=0)
    crc_stored = struct.unpack("<I", buf[-4:])[0]
    crc_actual = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if crc_actual != crc_stored:
        raise FormatError("checksum mismatch (corrupted file)", offset=len(buf) - 4)

    r = _Reader(buf[:-4])
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic (expected {MAGIC!r})", offset=0)
    version = r.u("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", offset=4)
    n_tensors = r.u("<I", "tensor count")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_off = r.off
        name_len = r.u("<H", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", offset=name_off) from exc
        code = r.u("<B", "dtype code")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", offset=r.off - 1)
        rank = r.u("<B", "rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(count * dtype.itemsize, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()

    meta_len = r.u("<I", "footer length")
    try:
        meta = json.loads(r.take(meta_len, "footer").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON footer: {exc}", offset=r.off) from exc
    if r.off != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.off} trailing bytes after footer", offset=r.off)
    return tensors, meta


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------

def save_model(model: Model, path, extra_meta: dict | None = None) -> None:
    tensors = {p.name: p.data for p in model.parameters()}
    meta = {
        "kind": "model",
        "config": asdict(model.config),
        "layer_kinds": list(model.kinds()),
    }
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, tensors, meta)


def _linear_from_tensors(kind: str, prefix: str, tensors: dict, n_heads: int, d_head: int) -> LinearBlockWeights:
    def param(name: str, required: bool = True) -> Parameter | None:
        full_name = f"{prefix}.{name}"
        if full_name not in tensors:
            if required:
                raise FormatError(f"missing tensor {full_name!r}")
            return None
        return Parameter(tensors[full_name].copy(), full_name)

    gated = kind in ("gla", "gdn")
    return LinearBlockWeights(
        kind, n_heads, d_head,
        param("wq"), param("wk"), param("wv"), param("wo"),
        w_alpha=param("w_alpha", required=gated),
        b_alpha=param("b_alpha", required=gated),
        w_beta=param("w_beta", required=kind == "gdn"),
        b_beta=param("b_beta", required=kind == "gdn"),
    )


def load_model(path) -> Model:
    tensors, meta = read_container(path)
    if meta.get("kind") != "model":
        raise FormatError(f"container holds {meta.get('kind')!r}, not a model")
    config = ModelConfig(**meta["config"]).validate()
    kinds = meta["layer_kinds"]
    if len(kinds) != config.n_layers:
        raise FormatError(f"{len(kinds)} layer kinds for n_layers={config.n_layers}")

    def param(name: str) -> Parameter:
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}")
        return Parameter(tensors[name].copy(), name)

    layers = []
    for i, kind in enumerate(kinds):
        p = f"layers.{i}"
        if kind == FULL:
            attn = FullAttnWeights(param(f"{p}.attn.wq"), param(f"{p}.attn.wk"),
                                   param(f"{p}.attn.wv"), param(f"{p}.attn.wo"))
        elif kind in VARIANTS:
            attn = _linear_from_tensors(kind, f"{p}.attn", tensors, config.n_heads, config.d_head)
        else:
            raise FormatError(f"unknown attention kind {kind!r} at layer {i}")
        mlp = MlpWeights(param(f"{p}.mlp.w_gate"), param(f"{p}.mlp.w_up"), param(f"{p}.mlp.w_down"))
        layers.append(Layer(attn, mlp, param(f"{p}.norm_attn"), param(f"{p}.norm_mlp")))
    return Model(config, param("emb"), layers, param("norm_final"), param("lm_head"))


def save_linear_blocks(blocks: dict[int, LinearBlockWeights], path, extra_meta: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    entries = []
    for layer in sorted(blocks):
        w = blocks[layer]
        entries.append({"layer": layer, "variant": w.variant,
                        "n_heads": w.n_heads, "d_head": w.d_head})
        for p in w.params():
            short = p.name.rsplit(".", 1)[-1]
            tensors[f"layer{layer}.{short}"] = p.data
    meta = {"kind": "linear_blocks", "entries": entries}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, tensors, meta)


def load_linear_blocks(path) -> dict[int, LinearBlockWeights]:
    tensors, meta = read_container(path)
    if meta.get("kind") != "linear_blocks":
        raise FormatError(f"container holds {meta.get('kind')!r}, not linear blocks")
    blocks: dict[int, LinearBlockWeights] = {}
    for entry in meta["entries"]:
        layer = entry["layer"]
        blocks[layer] = _linear_from_tensors(entry["variant"], f"layer{layer}", tensors,
                                             entry["n_heads"], entry["d_head"])
        for p in blocks[layer].params():
            p.name = f"layers.{layer}.attn.{p.name.rsplit('.', 1)[-1]}"
    return blocks
