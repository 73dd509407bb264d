"""SELAFD1 checkpoint container.

Layout: the ASCII magic line "SELAFD1", a plain-text header of
`meta <key> <value>` and `tensor <name> <dtype> <shape> <offset> <nbytes>`
lines, a `payload` terminator line, then the little-endian raster payloads
at the stated offsets (relative to the end of the terminator line).

f64 payloads round-trip bit-exactly; f32 is an explicit lossy storage mode.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .peft import PeftConfig, SelafdModel, wrap
from .vit import VitConfig, VitModel

MAGIC = b"SELAFD1"
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


def save_state(path, state: dict[str, np.ndarray],
               meta: dict[str, str] | None = None, dtype: str = "f64") -> None:
    """Write named arrays plus metadata. dtype="f32" halves size, lossily."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]

    header = io.StringIO()
    payload = io.BytesIO()
    for key, value in (meta or {}).items():
        if " " in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"meta key/value not header-safe: {key!r}")
        header.write(f"meta {key} {value}\n")
    for name, arr in state.items():
        if " " in name:
            raise CheckpointError(f"tensor name not header-safe: {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        shape = "x".join(str(s) for s in arr.shape) or "0"
        header.write(f"tensor {name} {dtype} {shape} {payload.tell()} {len(raw)}\n")
        payload.write(raw)

    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(header.getvalue().encode("ascii"))
        f.write(b"payload\n")
        f.write(payload.getvalue())


def load_state(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container back: float64 arrays (upcast if stored f32) + meta."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: bad magic, not a SELAFD1 container")
    try:
        head_end = blob.index(b"payload\n")
    except ValueError:
        raise CheckpointError(f"{path}: missing payload terminator") from None
    header = blob[len(MAGIC) + 1:head_end].decode("ascii")
    base = head_end + len(b"payload\n")

    state: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in header.splitlines():
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, dtype, shape_s, off_s, nbytes_s = rest.split(" ")
            if dtype not in _DTYPES:
                raise CheckpointError(f"{path}: unknown tensor dtype {dtype!r}")
            shape = tuple(int(s) for s in shape_s.split("x")) if shape_s != "0" else (0,)
            off, nbytes = int(off_s), int(nbytes_s)
            raw = blob[base + off:base + off + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
            state[name] = arr.astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unknown header line kind {kind!r}")
    return state, meta


# ---------------------------------------------------------------------------
# model <-> container
# ---------------------------------------------------------------------------

def model_state(model: VitModel | SelafdModel) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def save_model(path, model: VitModel | SelafdModel,
               extra_meta: dict[str, str] | None = None, dtype: str = "f64") -> None:
    if isinstance(model, SelafdModel):
        meta = dict(model.backbone.config.to_meta())
        meta["mode"] = model.mode
        if model.peft is not None:
            meta.update(model.peft.to_meta())
    else:
        meta = dict(model.config.to_meta())
        meta["mode"] = "backbone"
    meta.update(extra_meta or {})
    save_state(path, model_state(model), meta, dtype=dtype)


def _apply_state(model: VitModel | SelafdModel, state: dict[str, np.ndarray],
                 path) -> None:
    params = dict(model.named_parameters())
    for name, arr in state.items():
        if name not in params:
            raise CheckpointError(f"{path}: unexpected tensor {name!r} for this model")
        p = params[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape {arr.shape} for {name!r}, model expects {p.data.shape}")
        p.data = arr.copy()


def load_model(path) -> VitModel | SelafdModel:
    """Rebuild the model a container describes, weights included."""
    state, meta = load_state(path)
    cfg = VitConfig.from_meta(meta)
    backbone = VitModel(cfg, rng=None)
    mode = meta.get("mode", "backbone")
    if mode == "backbone":
        _apply_state(backbone, state, path)
        return backbone
    peft = PeftConfig.from_meta(meta) if "peft.rank" in meta else None
    model = wrap(backbone, mode, peft, rng=None)
    _apply_state(model, state, path)
    return model


def tensors_hash(named_params) -> str:
    """sha256 over (name, raw float64 bytes) pairs, in iteration order."""
    import hashlib
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode("ascii"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def frozen_hash(model: VitModel | SelafdModel) -> str:
    """Hash of every non-trainable tensor; unchanged across a training run."""
    return tensors_hash((n, p) for n, p in model.named_parameters()
                        if not p.requires_grad)


def load_backbone(path) -> VitModel:
    """Load only the backbone (+head) weights out of any container."""
    state, meta = load_state(path)
    cfg = VitConfig.from_meta(meta)
    backbone = VitModel(cfg, rng=None)
    backbone_only = {k: v for k, v in state.items() if not k.startswith("peft/")}
    _apply_state(backbone, backbone_only, path)
    return backbone
