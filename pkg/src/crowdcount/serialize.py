"""Binary model checkpoint format.

Little-endian layout:

    magic   b"SONN"
    u32     version (1)
    u32     layer count
    payload one record per parameterized layer:
              u8 kind (1 = operational column layer, 2 = fusion conv)
              u8 column index (255 for fusion)
              u8 pool-after flag
              u8 reserved (0)
              u32 x8: q_max, in_ch, out_ch, k_h, k_w, pad_h, pad_w, stride
              f32 weights (q_max*out*in*k_h*k_w values, bank-major)
              f32 bias (out values)
    u32     CRC32 of the payload

Weights are always stored as 32-bit floats; loading yields an f32 model.
"""

import struct
import zlib

import numpy as np

from .errors import ModelFormatError
from .model import DensityNet, LayerSpec, ModelConfig, build_model

MAGIC = b"SONN"
VERSION = 1
_KIND_COLUMN = 1
_KIND_FUSION = 2
_REC_HEAD = struct.Struct("<BBBB8I")


def _layer_record(kind, column, pool_after, q_max, spec, weights, bias):
    head = _REC_HEAD.pack(
        kind,
        column,
        1 if pool_after else 0,
        0,
        q_max,
        spec.in_channels,
        spec.out_channels,
        spec.kernel_h,
        spec.kernel_w,
        spec.pad_h,
        spec.pad_w,
        spec.stride,
    )
    w32 = np.ascontiguousarray(weights, dtype="<f4")
    b32 = np.ascontiguousarray(bias, dtype="<f4")
    return head + w32.tobytes() + b32.tobytes()


def serialize_model(model: DensityNet) -> bytes:
    records = []
    for ci, (layers, cspec) in enumerate(zip(model.columns, model.config.columns)):
        for layer, lspec in zip(layers, cspec):
            records.append(
                _layer_record(
                    _KIND_COLUMN,
                    ci,
                    lspec.pool_after,
                    layer.q_max,
                    layer.spec,
                    layer.weights,
                    layer.bias,
                )
            )
    records.append(
        _layer_record(
            _KIND_FUSION, 255, False, 1, model.fusion.spec,
            model.fusion.weights, model.fusion.bias,
        )
    )
    payload = b"".join(records)
    header = MAGIC + struct.pack("<II", VERSION, len(records))
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def save_model(model: DensityNet, path):
    data = serialize_model(model)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def deserialize_model(data: bytes) -> DensityNet:
    if len(data) < 16:
        raise ModelFormatError("file too short for a model header")
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    payload = data[12:-4]
    (crc_stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) != crc_stored:
        raise ModelFormatError("payload CRC mismatch (corrupt file)")

    offset = 0
    columns = {}
    fusion_rec = None
    in_channels = None
    for _ in range(n_layers):
        if offset + _REC_HEAD.size > len(payload):
            raise ModelFormatError("truncated layer record header")
        (
            kind, column, pool_after, _res,
            q_max, c_in, c_out, k_h, k_w, pad_h, pad_w, stride,
        ) = _REC_HEAD.unpack_from(payload, offset)
        offset += _REC_HEAD.size
        n_w = q_max * c_out * c_in * k_h * k_w
        n_bytes = 4 * (n_w + c_out)
        if offset + n_bytes > len(payload):
            raise ModelFormatError("truncated weight data")
        w = np.frombuffer(payload, "<f4", n_w, offset).reshape(
            q_max, c_out, c_in, k_h, k_w
        )
        b = np.frombuffer(payload, "<f4", c_out, offset + 4 * n_w)
        offset += n_bytes
        if kind == _KIND_COLUMN:
            if k_h != k_w:
                raise ModelFormatError("non-square column kernels are not supported")
            columns.setdefault(column, []).append(
                (LayerSpec(k_h, c_out, q_max, pool_after=bool(pool_after)), w, b)
            )
            if column == 0 and len(columns[0]) == 1:
                in_channels = c_in
        elif kind == _KIND_FUSION:
            fusion_rec = (c_out, w.reshape(c_out, c_in, k_h, k_w), b)
        else:
            raise ModelFormatError(f"unknown layer kind {kind}")
    if offset != len(payload):
        raise ModelFormatError("trailing bytes after last layer record")
    if fusion_rec is None or not columns:
        raise ModelFormatError("model file missing column or fusion layers")

    config = ModelConfig(
        columns=tuple(
            tuple(spec for spec, _, _ in columns[ci]) for ci in sorted(columns)
        ),
        in_channels=in_channels,
        fusion_out_channels=fusion_rec[0],
        precision="f32",
    )
    model = build_model(config)
    for ci in sorted(columns):
        for li, (_, w, b) in enumerate(columns[ci]):
            model.columns[ci][li].weights[...] = w
            model.columns[ci][li].bias[...] = b
    model.fusion.weights[...] = fusion_rec[1]
    model.fusion.bias[...] = fusion_rec[2]
    return model


def load_model(path) -> DensityNet:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise ModelFormatError(f"cannot read model {path}: {e}") from None
    try:
        return deserialize_model(data)
    except ModelFormatError as e:
        raise ModelFormatError(f"{path}: {e}") from None
