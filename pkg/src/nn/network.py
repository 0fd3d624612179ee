"""
全连接网络的前向、反向与参数更新

只依赖 numpy 的最小可微分内核：
- NetworkSpec：固定拓扑（隐藏层 ReLU，输出层恒等）
- ParameterSet：按名字有序存放的全部可训练张量，带 VALUE / ADVANTAGE 分区
- forward / backward：前向计算并记录 GradientTape，反向模式累积梯度
- SGD / Adam：按分区更新参数
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from src.utils.errors import UsageError


class Partition(str, Enum):
    """参数分区"""
    VALUE = "value"
    ADVANTAGE = "advantage"
    ALL = "all"


@dataclass(frozen=True)
class NetworkSpec:
    """网络结构描述"""
    input_dim: int
    hidden_widths: Tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        if any(int(d) < 1 for d in dims):
            raise UsageError(f"网络维度必须 >= 1：{dims}")
        if self.activation != "relu":
            raise UsageError(f"不支持的激活函数：{self.activation}")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def tensor_shapes(self, prefix: str) -> List[Tuple[str, Tuple[int, ...]]]:
        """按层顺序列出 (张量名, 形状)，权重形状为 (out, in)"""
        dims = self.layer_dims
        shapes = []
        for k in range(self.n_layers):
            shapes.append((f"{prefix}.W{k}", (dims[k + 1], dims[k])))
            shapes.append((f"{prefix}.b{k}", (dims[k + 1],)))
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NetworkSpec":
        return cls(
            input_dim=int(data["input_dim"]),
            hidden_widths=tuple(data["hidden_widths"]),
            output_dim=int(data["output_dim"]),
            activation=data.get("activation", "relu"),
        )


class ParameterSet:
    """
    全部可训练张量的有序集合

    扁平索引由插入顺序决定；每个张量恰好属于 VALUE 或 ADVANTAGE 之一。
    每次原地更新都会递增 version，用于识别过期的 GradientTape。
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._tensors: Dict[str, np.ndarray] = {}
        self._partitions: Dict[str, Partition] = {}
        self.version = 0

    def add(self, name: str, array: np.ndarray, partition: Partition):
        """登记一个张量"""
        if name in self._tensors:
            raise UsageError(f"参数重复登记：{name}")
        if partition not in (Partition.VALUE, Partition.ADVANTAGE):
            raise UsageError(f"张量只能属于 VALUE 或 ADVANTAGE：{name}")
        self._tensors[name] = np.array(array, dtype=self.dtype)
        self._partitions[name] = Partition(partition)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self, partition: Partition = Partition.ALL) -> List[str]:
        if partition == Partition.ALL:
            return list(self._tensors)
        return [n for n, p in self._partitions.items() if p == partition]

    def partition_of(self, name: str) -> Partition:
        return self._partitions[name]

    @property
    def size(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def flat(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([t.ravel() for t in self._tensors.values()])

    def load_flat(self, vector: np.ndarray):
        """用扁平向量覆盖全部张量"""
        vector = np.asarray(vector, dtype=self.dtype)
        if vector.shape != (self.size,):
            raise UsageError(f"扁平向量长度 {vector.shape} 与参数长度 {self.size} 不一致")
        offset = 0
        for name, tensor in self._tensors.items():
            n = tensor.size
            tensor[...] = vector[offset:offset + n].reshape(tensor.shape)
            offset += n
        self.version += 1

    def flatten_grads(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        """把按名字的梯度排成与 flat() 相同索引的向量，缺失项补 0"""
        parts = []
        for name, tensor in self._tensors.items():
            g = grads.get(name)
            parts.append(np.zeros(tensor.size, dtype=self.dtype) if g is None else np.asarray(g).ravel())
        if not parts:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate(parts)

    def copy(self) -> "ParameterSet":
        clone = ParameterSet(self.dtype)
        for name, tensor in self._tensors.items():
            clone.add(name, tensor.copy(), self._partitions[name])
        return clone

    def copy_values_from(self, other: "ParameterSet", partition: Partition = Partition.ALL):
        """从同结构的参数集复制数值"""
        for name in self.names(partition):
            self._tensors[name][...] = other[name]
        self.version += 1

    def add_network(self, spec: NetworkSpec, prefix: str, partition: Partition,
                    rng: np.random.Generator, scheme: str = "he"):
        """初始化并登记一个网络的全部张量"""
        for name, tensor in init_params(spec, rng, scheme=scheme, prefix=prefix).items():
            self.add(name, tensor, partition)


@dataclass
class GradientTape:
    """一次前向计算的记录，只能反向一次"""
    spec: NetworkSpec
    prefix: str
    params: ParameterSet
    version: int
    activations: List[np.ndarray]
    preactivations: List[np.ndarray]
    single: bool
    used: bool = field(default=False)


class BackwardResult(NamedTuple):
    grads: Dict[str, np.ndarray]
    input_cotangent: np.ndarray


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def forward(spec: NetworkSpec, params: ParameterSet, inputs, prefix: str = "net") -> Tuple[np.ndarray, GradientTape]:
    """
    前向计算

    Args:
        spec: 网络结构
        params: 参数集（按 prefix 取本网络的张量）
        inputs: 长度 input_dim 的向量，或 (batch, input_dim) 矩阵
        prefix: 本网络张量名前缀

    Returns:
        (输出, tape)
    """
    x = np.asarray(inputs, dtype=params.dtype)
    single = x.ndim == 1
    h = x[np.newaxis, :] if single else x
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise UsageError(f"输入维度 {x.shape} 与网络 input_dim={spec.input_dim} 不一致")

    activations = [h]
    preactivations = []
    last = spec.n_layers - 1
    for k in range(spec.n_layers):
        # einsum 逐行独立求值，同一输入行在任何批次位置得到相同的比特
        z = np.einsum("bi,oi->bo", h, params[f"{prefix}.W{k}"]) + params[f"{prefix}.b{k}"]
        if k < last:
            preactivations.append(z)
            h = _relu(z)
            activations.append(h)
        else:
            h = z

    tape = GradientTape(spec, prefix, params, params.version, activations, preactivations, single)
    return (h[0] if single else h), tape


def backward(tape: GradientTape, output_cotangent) -> BackwardResult:
    """
    反向模式累积 ∂<cotangent, output>/∂params

    Args:
        tape: forward 产生的记录
        output_cotangent: 与输出同形状的余切向量

    Returns:
        BackwardResult(按张量名的梯度, 对输入的余切)
    """
    if tape.used:
        raise UsageError("GradientTape 只能反向一次")
    if tape.params.version != tape.version:
        raise UsageError("参数在前向之后被更新过，GradientTape 已过期")
    tape.used = True

    spec, prefix, params = tape.spec, tape.prefix, tape.params
    dy = np.asarray(output_cotangent, dtype=params.dtype)
    dy = dy[np.newaxis, :] if tape.single else dy
    batch = tape.activations[0].shape[0]
    if dy.shape != (batch, spec.output_dim):
        raise UsageError(f"余切形状 {dy.shape} 与输出形状 {(batch, spec.output_dim)} 不一致")

    grads: Dict[str, np.ndarray] = {}
    for k in reversed(range(spec.n_layers)):
        W = params[f"{prefix}.W{k}"]
        grads[f"{prefix}.W{k}"] = dy.T @ tape.activations[k]
        grads[f"{prefix}.b{k}"] = dy.sum(axis=0)
        dx = dy @ W
        if k > 0:
            dy = dx * (tape.preactivations[k - 1] > 0)

    return BackwardResult(grads, dx[0] if tape.single else dx)


def init_params(spec: NetworkSpec, rng: np.random.Generator, scheme: str = "he",
                prefix: str = "net") -> Dict[str, np.ndarray]:
    """
    初始化一个网络的参数

    he：权重 ~ N(0, 2/fan_in)，偏置为 0；zeros：全 0
    """
    tensors = {}
    for name, shape in spec.tensor_shapes(prefix):
        if name.rsplit(".", 1)[1].startswith("b") or scheme == "zeros":
            tensors[name] = np.zeros(shape)
        elif scheme == "he":
            fan_in = shape[1]
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            raise UsageError(f"未知的初始化方案：{scheme}")
    return tensors


# ========== 参数更新 ==========

def _selected(params: ParameterSet, grads: Mapping[str, np.ndarray], partition: Partition) -> Iterable[str]:
    return [n for n in params.names(Partition(partition)) if n in grads]


def sgd_update(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float,
               partition: Partition = Partition.ALL) -> ParameterSet:
    """p ← p − lr·g，只作用于所选分区"""
    for name in _selected(params, grads, partition):
        params[name][...] -= lr * np.asarray(grads[name], dtype=params.dtype).reshape(params[name].shape)
    params.version += 1
    return params


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """max_norm <= 0 时不裁剪"""
    if max_norm <= 0:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


class SGD:
    """常数学习率 SGD"""

    name = "sgd"

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float,
             partition: Partition = Partition.ALL) -> ParameterSet:
        return sgd_update(params, grads, lr, partition)


class Adam:
    """Adam，矩估计按张量名保存"""

    name = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def step(self, params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float,
             partition: Partition = Partition.ALL) -> ParameterSet:
        for name in _selected(params, grads, partition):
            g = np.asarray(grads[name], dtype=params.dtype).reshape(params[name].shape)
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            t = self._t.get(name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[name][...] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self._m[name], self._v[name], self._t[name] = m, v, t
        params.version += 1
        return params


def make_optimizer(name: str, **kwargs):
    """按名字创建优化器：sgd / adam"""
    if name == "sgd":
        return SGD()
    if name == "adam":
        return Adam(**kwargs)
    raise UsageError(f"未知的优化器：{name}")


def merge_grads(*parts: Optional[Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """把多次 backward 的梯度按名字相加"""
    total: Dict[str, np.ndarray] = {}
    for part in parts:
        if not part:
            continue
        for name, g in part.items():
            total[name] = total[name] + g if name in total else np.array(g)
    return total
