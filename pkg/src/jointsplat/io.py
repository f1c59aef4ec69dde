"""Images, checkpoints and scene files.

Images are stored as 8-bit sRGB-ish values (gamma 1/2.2) and decoded back to
linear.  Checkpoints use a small sectioned container::

    b"JGS1" | u32 version | u32 section count
    per section: u16 name length | name | u64 payload length | u32 crc32 | payload

Payloads are records of typed fields (all little-endian); tensors keep their
dtype and raw bytes so a load reproduces the saved values bit for bit.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, fields

import numpy as np
import torch

from .body import BodyParams, Capsule, Skeleton
from .dynamics import HashGridConfig, TemporalNet, TemporalNetConfig
from .gaussians import GaussianSet
from .geometry import CameraIntrinsics, RigidTransform, Rotation
from .optim import AdamState
from .render import ImageBuffer
from .scene import NonRigidMotion, SceneBundle, SceneConfig
from .train import ModelState

GAMMA = 2.2
MAGIC = b"JGS1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ImageIOError(OSError):
    pass


# ---------------------------------------------------------------------------
# files

def atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_srgb(rgb) -> np.ndarray:
    x = rgb.detach().numpy() if isinstance(rgb, torch.Tensor) else np.asarray(rgb, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("image has non-finite values")
    return np.round(np.clip(x, 0.0, 1.0) ** (1.0 / GAMMA) * 255.0).astype(np.uint8)


def decode_srgb(codes) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) / 255.0) ** GAMMA


def _write_ppm(codes: np.ndarray) -> bytes:
    h, w, _ = codes.shape
    return f"P6\n{w} {h}\n255\n".encode() + codes.tobytes()


def _read_ppm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("only binary 8-bit PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pix.reshape(h, w, 3)


def write_image(buffer, path):
    """Write linear RGB (an ImageBuffer, tensor or array ``[H, W, 3]``).

    ``.ppm`` is written directly; anything else goes through Pillow.
    """
    rgb = buffer.rgb if isinstance(buffer, ImageBuffer) else buffer
    codes = encode_srgb(rgb)
    if codes.ndim != 3 or codes.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] image, got shape {codes.shape}")
    try:
        if str(path).lower().endswith(".ppm"):
            data = _write_ppm(codes)
        else:
            from PIL import Image
            import io as _io

            buf = _io.BytesIO()
            Image.fromarray(codes, "RGB").save(buf, format="PNG")
            data = buf.getvalue()
        atomic_write(path, data)
    except OSError as err:
        raise ImageIOError(f"cannot write image {path}: {err}") from err


def read_image(path) -> ImageBuffer:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as err:
        raise ImageIOError(f"cannot read image {path}: {err}") from err
    try:
        if data.startswith(b"P6"):
            codes = _read_ppm(data)
        else:
            from PIL import Image
            import io as _io

            codes = np.asarray(Image.open(_io.BytesIO(data)).convert("RGB"))
    except Exception as err:
        raise ImageIOError(f"cannot decode image {path}: {err}") from err
    rgb = torch.from_numpy(decode_srgb(codes))
    return ImageBuffer(rgb, torch.ones(rgb.shape[:2], dtype=torch.float64))


# ---------------------------------------------------------------------------
# typed records

_NONE, _BOOL, _INT, _FLOAT, _STR, _TENSOR, _ARRAY = range(7)
_DTYPES = [torch.float64, torch.float32, torch.int64, torch.int32, torch.bool, torch.uint8]
_NP = {torch.float64: "<f8", torch.float32: "<f4", torch.int64: "<i8", torch.int32: "<i4",
       torch.bool: "|b1", torch.uint8: "|u1"}


def _pack_array(a: np.ndarray, dtype: torch.dtype) -> bytes:
    a = np.ascontiguousarray(a).astype(_NP[dtype], copy=False)
    head = struct.pack("<BB", _DTYPES.index(dtype), a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def pack_record(rec: dict) -> bytes:
    out = [struct.pack("<I", len(rec))]
    for key, v in rec.items():
        k = key.encode()
        out.append(struct.pack("<H", len(k)) + k)
        if v is None:
            out.append(struct.pack("<B", _NONE))
        elif isinstance(v, (bool, np.bool_)):
            out.append(struct.pack("<BB", _BOOL, bool(v)))
        elif isinstance(v, (int, np.integer)):
            out.append(struct.pack("<Bq", _INT, int(v)))
        elif isinstance(v, (float, np.floating)):
            out.append(struct.pack("<Bd", _FLOAT, float(v)))
        elif isinstance(v, str):
            b = v.encode()
            out.append(struct.pack("<BI", _STR, len(b)) + b)
        elif isinstance(v, torch.Tensor):
            t = v.detach().cpu()
            out.append(struct.pack("<B", _TENSOR) + _pack_array(t.numpy(), t.dtype))
        elif isinstance(v, np.ndarray):
            dt = torch.from_numpy(np.zeros(0, dtype=v.dtype)).dtype
            out.append(struct.pack("<B", _ARRAY) + _pack_array(v, dt))
        else:
            raise TypeError(f"cannot serialise field {key!r} of type {type(v).__name__}")
    return b"".join(out)


def unpack_record(data: bytes) -> dict:
    (n,), pos = struct.unpack_from("<I", data), 4
    rec = {}
    for _ in range(n):
        (kl,) = struct.unpack_from("<H", data, pos)
        key = data[pos + 2:pos + 2 + kl].decode()
        pos += 2 + kl
        (tag,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if tag == _NONE:
            v = None
        elif tag == _BOOL:
            v = bool(data[pos])
            pos += 1
        elif tag == _INT:
            (v,) = struct.unpack_from("<q", data, pos)
            pos += 8
        elif tag == _FLOAT:
            (v,) = struct.unpack_from("<d", data, pos)
            pos += 8
        elif tag == _STR:
            (ln,) = struct.unpack_from("<I", data, pos)
            v = data[pos + 4:pos + 4 + ln].decode()
            pos += 4 + ln
        elif tag in (_TENSOR, _ARRAY):
            code, ndim = struct.unpack_from("<BB", data, pos)
            shape = struct.unpack_from(f"<{ndim}Q", data, pos + 2)
            pos += 2 + 8 * ndim
            dtype = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            a = np.frombuffer(data, dtype=_NP[dtype], count=count, offset=pos).reshape(shape).copy()
            pos += a.nbytes
            v = torch.from_numpy(a) if tag == _TENSOR else a
        else:
            raise CheckpointError(f"unknown field tag {tag} for {key!r}")
        rec[key] = v
    return rec


def pack_sections(sections: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, rec in sections.items():
        payload = pack_record(rec)
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<QI", len(payload), zlib.crc32(payload)))
        out.append(payload)
    return b"".join(out)


def unpack_sections(data: bytes, source="<bytes>") -> dict:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < 12:
        raise CheckpointError(f"{source}: truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: incompatible checkpoint version {version} (this build reads {VERSION})")
    pos, out = 12, {}
    for _ in range(count):
        try:
            (nl,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nl].decode()
            pos += 2 + nl
            length, crc = struct.unpack_from("<QI", data, pos)
        except (struct.error, UnicodeDecodeError) as err:
            raise CheckpointError(f"{source}: truncated section table") from err
        pos += 12
        payload = data[pos:pos + length]
        pos += length
        if len(payload) != length:
            raise CheckpointError(f"{source}: section {name!r} is truncated")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{source}: section {name!r} failed its CRC32 check")
        try:
            out[name] = unpack_record(payload)
        except (struct.error, ValueError, UnicodeDecodeError) as err:
            raise CheckpointError(f"{source}: section {name!r} is malformed: {err}") from err
    return out


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read {path}: {err}") from err


def _need(sections: dict, *names):
    missing = [n for n in names if n not in sections]
    if missing:
        raise CheckpointError(f"missing sections {missing}")


# ---------------------------------------------------------------------------
# converters

def _gaussians_rec(g: GaussianSet) -> dict:
    return {f.name: getattr(g, f.name) for f in fields(g)}


def _gaussians(rec: dict) -> GaussianSet:
    return GaussianSet(**rec)


def _body_rec(b: BodyParams) -> dict:
    return {"theta": b.theta, "trans": b.trans, "beta": b.beta}


def _body(rec: dict) -> BodyParams:
    return BodyParams(rec["theta"], rec["trans"], rec["beta"])


def _skeleton_rec(s: Skeleton) -> dict:
    caps = s.capsules
    return {
        "parents": s.parents, "offsets": s.offsets, "vertices": s.vertices,
        "vertex_weights": s.vertex_weights, "vertex_colors": s.vertex_colors,
        "cap_owner": np.array([c.owner for c in caps], dtype=np.int64),
        "cap_start": np.array([c.start for c in caps], dtype=np.float64).reshape(-1, 3),
        "cap_end": np.array([c.end for c in caps], dtype=np.float64).reshape(-1, 3),
        "cap_radius": np.array([c.radius for c in caps], dtype=np.float64),
        "cap_child": np.array([c.child for c in caps], dtype=np.int64),
    }


def _skeleton(rec: dict) -> Skeleton:
    caps = tuple(Capsule(int(o), s, e, float(r), int(c)) for o, s, e, r, c in
                 zip(rec["cap_owner"], rec["cap_start"], rec["cap_end"], rec["cap_radius"], rec["cap_child"]))
    return Skeleton(rec["parents"], rec["offsets"], caps, rec["vertices"], rec["vertex_weights"],
                    rec["vertex_colors"])


def _cameras_rec(intr: CameraIntrinsics, poses: list) -> dict:
    rec = {f.name: getattr(intr, f.name) for f in fields(intr)}
    rec["quats"] = np.array([p.rotation.q for p in poses], dtype=np.float64).reshape(-1, 4)
    rec["translations"] = np.array([p.translation for p in poses], dtype=np.float64).reshape(-1, 3)
    return rec


def _cameras(rec: dict):
    intr = CameraIntrinsics(**{f.name: rec[f.name] for f in fields(CameraIntrinsics)})
    poses = [RigidTransform(Rotation.from_unit(q), t) for q, t in zip(rec["quats"], rec["translations"])]
    return intr, poses


def _net_rec(net: TemporalNet) -> dict:
    c = net.config
    rec = {f"config.{f.name}": getattr(c, f.name) for f in fields(c) if f.name != "hash_grid"}
    for f in fields(c.hash_grid):
        v = getattr(c.hash_grid, f.name)
        rec[f"hash.{f.name}"] = np.asarray(v, dtype=np.float64) if isinstance(v, tuple) else v
    for k, v in net.state_dict().items():
        rec[f"param.{k}"] = v
    return rec


def _net(rec: dict) -> TemporalNet:
    hg = {k[5:]: (tuple(float(x) for x in v) if isinstance(v, np.ndarray) else v)
          for k, v in rec.items() if k.startswith("hash.")}
    cfg = {k[7:]: v for k, v in rec.items() if k.startswith("config.")}
    net = TemporalNet(TemporalNetConfig(hash_grid=HashGridConfig(**hg), **cfg))
    net.load_state_dict({k[6:]: v for k, v in rec.items() if k.startswith("param.")})
    return net


def _adam_rec(a: AdamState) -> dict:
    rec = {}
    for k in a.m:
        rec[f"m:{k}"] = a.m[k]
        rec[f"v:{k}"] = a.v[k]
        rec[f"step:{k}"] = a.step[k]
    return rec


def _adam(rec: dict) -> AdamState:
    a = AdamState()
    for k, v in rec.items():
        kind, key = k.split(":", 1)
        getattr(a, kind)[key] = v
    return a


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    state: ModelState
    adam: AdamState
    skeleton: Skeleton
    intrinsics: CameraIntrinsics
    cameras: list  # coarse world -> camera poses; corrections live in state
    config_text: str = ""  # RunConfig snapshot


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    st = ck.state
    return pack_sections({
        "config": {"text": ck.config_text},
        "human": _gaussians_rec(st.human),
        "background": _gaussians_rec(st.background),
        "body": _body_rec(st.body),
        "cameras": {**_cameras_rec(ck.intrinsics, ck.cameras), "corrections": st.corrections},
        "skeleton": _skeleton_rec(ck.skeleton),
        "net": _net_rec(st.net),
        "adam": _adam_rec(ck.adam),
        "iteration": {"iteration": st.iteration},
    })


def checkpoint_from_bytes(data: bytes, source="<bytes>") -> Checkpoint:
    s = unpack_sections(data, source)
    _need(s, "config", "human", "background", "body", "cameras", "skeleton", "net", "adam", "iteration")
    intr, poses = _cameras(s["cameras"])
    state = ModelState(_gaussians(s["human"]), _gaussians(s["background"]), _net(s["net"]),
                       s["cameras"]["corrections"], _body(s["body"]), s["iteration"]["iteration"])
    return Checkpoint(state, _adam(s["adam"]), _skeleton(s["skeleton"]), intr, poses, s["config"]["text"])


def save_checkpoint(ck: Checkpoint, path):
    atomic_write(path, checkpoint_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(_read(path), path)


# ---------------------------------------------------------------------------
# scene bundles

def scene_bytes(scene: SceneBundle) -> bytes:
    m = scene.motion
    return pack_sections({
        "scene_config": {f.name: getattr(scene.config, f.name) for f in fields(scene.config)},
        "skeleton": _skeleton_rec(scene.skeleton),
        "gt_cameras": _cameras_rec(scene.intrinsics, scene.gt_cameras),
        "init_cameras": _cameras_rec(scene.intrinsics, scene.init_cameras),
        "gt_body": _body_rec(scene.gt_body),
        "init_body": _body_rec(scene.init_body),
        "gt_human": _gaussians_rec(scene.gt_human),
        "gt_background": _gaussians_rec(scene.gt_background),
        "init_human": _gaussians_rec(scene.init_human),
        "init_background": _gaussians_rec(scene.init_background),
        "motion": {"amplitude": m.amplitude, "wavenumber": m.wavenumber, "flicker": m.flicker,
                   "direction": np.asarray(m.direction, dtype=np.float64),
                   "phases": np.asarray(m.phases, dtype=np.float64)},
        "frames": {"images": scene.images, "masks": scene.masks, "human_white": scene.human_white},
        "meta": {"scene_radius": scene.scene_radius, "seed": scene.seed},
    })


def scene_from_bytes(data: bytes, source="<bytes>") -> SceneBundle:
    s = unpack_sections(data, source)
    _need(s, "scene_config", "skeleton", "gt_cameras", "init_cameras", "gt_body", "init_body", "gt_human",
          "gt_background", "init_human", "init_background", "motion", "frames", "meta")
    intr, gt_cams = _cameras(s["gt_cameras"])
    _, init_cams = _cameras(s["init_cameras"])
    mo = s["motion"]
    motion = NonRigidMotion(mo["amplitude"], mo["wavenumber"], tuple(float(x) for x in mo["direction"]),
                            mo["flicker"], tuple(float(x) for x in mo["phases"]))
    fr = s["frames"]
    return SceneBundle(
        config=SceneConfig(**s["scene_config"]), skeleton=_skeleton(s["skeleton"]), intrinsics=intr,
        gt_cameras=gt_cams, init_cameras=init_cams, gt_body=_body(s["gt_body"]), init_body=_body(s["init_body"]),
        gt_human=_gaussians(s["gt_human"]), gt_background=_gaussians(s["gt_background"]),
        init_human=_gaussians(s["init_human"]), init_background=_gaussians(s["init_background"]),
        motion=motion, images=fr["images"], masks=fr["masks"], human_white=fr["human_white"],
        scene_radius=s["meta"]["scene_radius"], seed=s["meta"]["seed"],
    )


def save_scene(scene: SceneBundle, path):
    atomic_write(path, scene_bytes(scene))


def load_scene(path) -> SceneBundle:
    return scene_from_bytes(_read(path), path)
