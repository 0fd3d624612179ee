"""
检查点读写

文件格式（.ndq，固定小端）：

    7 字节   ASCII 魔数 b"NASHDQN"
    1 字节   格式版本号（当前为 1）
    4 字节   uint32，JSON 头长度 H
    H 字节   UTF-8 JSON 头（键排序、紧凑分隔符）
    其余     按头中 tensors 顺序依次存放的 float64 小端数据

JSON 头字段：
    specs      {网络名: NetworkSpec.to_dict()}
    tensors    [{name, shape, partition}, ...]
    dtype      参数集 dtype（float64 / float32）
    constants  模型常数（特征归一化、正定映射 epsilon 等）
    metadata   任意可 JSON 化的附加信息（市场参数、训练轮数等）

同一模型写两次得到逐字节相同的文件。
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from src.nn.network import NetworkSpec, ParameterSet, Partition
from src.utils.errors import CheckpointError

MAGIC = b"NASHDQN"
FORMAT_VERSION = 1
_DISK_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    specs: Dict[str, NetworkSpec]
    params: ParameterSet
    constants: Dict[str, Any]
    metadata: Dict[str, Any]


def encode_checkpoint(specs: Mapping[str, NetworkSpec], params: ParameterSet,
                      constants: Mapping[str, Any], metadata: Mapping[str, Any]) -> bytes:
    """序列化为字节串"""
    header = {
        "specs": {name: spec.to_dict() for name, spec in specs.items()},
        "tensors": [
            {"name": name, "shape": list(params[name].shape), "partition": params.partition_of(name).value}
            for name in params.names()
        ],
        "dtype": params.dtype.name,
        "constants": dict(constants),
        "metadata": dict(metadata),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(params[name].astype(_DISK_DTYPE).tobytes() for name in params.names())
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(header_bytes)) + header_bytes + body


def decode_checkpoint(blob: bytes) -> Checkpoint:
    """从字节串恢复"""
    if len(blob) < len(MAGIC) + 5 or not blob.startswith(MAGIC):
        raise CheckpointError("不是有效的检查点文件（魔数不匹配）")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"不支持的检查点版本：{version}")

    offset = len(MAGIC) + 1
    (header_len,) = struct.unpack("<I", blob[offset:offset + 4])
    offset += 4
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"检查点头解析失败：{e}")
    offset += header_len
    if not isinstance(header, dict):
        raise CheckpointError("检查点头应为 JSON 对象")

    try:
        params, offset = _decode_tensors(header, blob, offset)
        specs = {name: NetworkSpec.from_dict(d) for name, d in header["specs"].items()}
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"检查点头字段无效：{type(e).__name__}: {e}")
    if offset != len(blob):
        raise CheckpointError("检查点末尾存在多余数据")
    return Checkpoint(specs, params, header.get("constants", {}), header.get("metadata", {}))


def _decode_tensors(header: Dict[str, Any], blob: bytes, offset: int) -> Tuple[ParameterSet, int]:
    params = ParameterSet(header.get("dtype", "float64"))
    for entry in header["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * _DISK_DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(f"检查点数据被截断：{entry['name']}")
        data = np.frombuffer(blob, dtype=_DISK_DTYPE, count=count, offset=offset).reshape(shape)
        params.add(entry["name"], data, Partition(entry["partition"]))
        offset += nbytes
    return params, offset


def save_checkpoint(path: Path, specs: Mapping[str, NetworkSpec], params: ParameterSet,
                    constants: Mapping[str, Any], metadata: Mapping[str, Any]) -> Path:
    """写入检查点文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(specs, params, constants, metadata))
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """读取检查点文件"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在：{path}")
    return decode_checkpoint(path.read_bytes())
