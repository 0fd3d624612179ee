"""
全连接网络前向 / 反向与参数更新测试
"""

import numpy as np
import pytest

from src.nn.network import (
    Adam,
    NetworkSpec,
    ParameterSet,
    Partition,
    backward,
    clip_by_global_norm,
    forward,
    global_norm,
    init_params,
    make_optimizer,
    merge_grads,
    sgd_update,
)
from src.utils.errors import UsageError


def _network(spec, seed, prefix="net", partition=Partition.VALUE):
    params = ParameterSet()
    params.add_network(spec, prefix, partition, np.random.default_rng(seed))
    # 偏置也随机化，避免全零偏置掩盖错误
    rng = np.random.default_rng(seed + 1000)
    for name in params.names():
        if ".b" in name:
            params[name][...] = rng.normal(0.0, 0.5, params[name].shape)
    return params


def _straight_line(spec, params, x, prefix="net"):
    """逐元素循环的独立实现"""
    h = list(x)
    dims = spec.layer_dims
    for k in range(spec.n_layers):
        W = params[f"{prefix}.W{k}"]
        b = params[f"{prefix}.b{k}"]
        z = []
        for o in range(dims[k + 1]):
            acc = b[o]
            for i in range(dims[k]):
                acc += W[o, i] * h[i]
            z.append(acc)
        h = z if k == spec.n_layers - 1 else [max(v, 0.0) for v in z]
    return np.array(h)


def _finite_difference(params, loss_fn, eps=1e-6):
    base = params.flat().copy()
    grad = np.zeros_like(base)
    for k in range(base.size):
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[k] += sign * eps
            params.load_flat(shifted)
            grad[k] += sign * loss_fn()
    params.load_flat(base)
    return grad / (2 * eps)


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


class TestNetworkSpec:
    """网络结构"""

    def test_tensor_shapes(self):
        """NN-001: 权重形状为 (out, in)"""
        spec = NetworkSpec(3, (4, 5), 2)
        assert spec.tensor_shapes("f") == [
            ("f.W0", (4, 3)), ("f.b0", (4,)),
            ("f.W1", (5, 4)), ("f.b1", (5,)),
            ("f.W2", (2, 5)), ("f.b2", (2,)),
        ]

    def test_invalid_dims(self):
        """NN-002: 维度必须 >= 1"""
        with pytest.raises(UsageError):
            NetworkSpec(0, (4,), 1)

    def test_dict_round_trip(self):
        """NN-003: to_dict / from_dict"""
        spec = NetworkSpec(3, (20, 40, 20), 5)
        assert NetworkSpec.from_dict(spec.to_dict()) == spec

    def test_he_init(self):
        """NN-004: He 初始化偏置为 0，zeros 方案全 0"""
        spec = NetworkSpec(4, (8,), 2)
        tensors = init_params(spec, np.random.default_rng(0), prefix="f")
        assert np.all(tensors["f.b0"] == 0) and np.all(tensors["f.b1"] == 0)
        assert np.any(tensors["f.W0"] != 0)
        zeros = init_params(spec, np.random.default_rng(0), scheme="zeros", prefix="f")
        assert all(np.all(t == 0) for t in zeros.values())


class TestForward:
    """前向计算"""

    def test_matches_straight_line(self):
        """NN-005: 与逐元素实现一致（1e-12）"""
        spec = NetworkSpec(4, (7, 5), 3)
        rng = np.random.default_rng(42)
        for seed in range(10):
            params = _network(spec, seed)
            x = rng.normal(size=4)
            out, _ = forward(spec, params, x)
            np.testing.assert_allclose(out, _straight_line(spec, params, x), rtol=0, atol=1e-12)

    def test_batch_rows_independent(self):
        """NN-006: 批量中每一行与单独计算逐比特相同"""
        spec = NetworkSpec(5, (20, 60, 20), 3)
        params = _network(spec, 3)
        x = np.random.default_rng(0).normal(size=(37, 5))
        batch_out, _ = forward(spec, params, x)
        for r in range(x.shape[0]):
            single, _ = forward(spec, params, x[r])
            assert np.array_equal(batch_out[r], single)
        reordered, _ = forward(spec, params, x[::-1].copy())
        assert np.array_equal(reordered[::-1], batch_out)

    def test_dimension_mismatch(self):
        """NN-007: 输入维度不符"""
        spec = NetworkSpec(3, (4,), 1)
        params = _network(spec, 0)
        with pytest.raises(UsageError):
            forward(spec, params, np.zeros(4))


class TestBackward:
    """反向模式梯度"""

    def test_param_gradients_match_finite_difference(self):
        """NN-008: 参数梯度与中心差分一致"""
        rng = np.random.default_rng(7)
        for trial in range(100):
            spec = NetworkSpec(3, (6, 4), 2)
            params = _network(spec, trial)
            x = rng.normal(size=(5, 3))
            c = rng.normal(size=(5, 2))

            out, tape = forward(spec, params, x)
            grads = backward(tape, c).grads
            analytic = params.flatten_grads(grads)
            numeric = _finite_difference(params, lambda: float(np.sum(c * forward(spec, params, x)[0])))
            assert _relative_error(analytic, numeric) < 1e-4

    def test_input_cotangent(self):
        """NN-009: 对输入的余切与中心差分一致"""
        spec = NetworkSpec(4, (9, 6), 3)
        params = _network(spec, 5)
        rng = np.random.default_rng(1)
        x = rng.normal(size=4)
        c = rng.normal(size=3)
        _, tape = forward(spec, params, x)
        dx = backward(tape, c).input_cotangent
        eps = 1e-6
        numeric = np.array([
            (np.dot(c, forward(spec, params, x + eps * e)[0]) - np.dot(c, forward(spec, params, x - eps * e)[0]))
            / (2 * eps)
            for e in np.eye(4)
        ])
        assert _relative_error(dx, numeric) < 1e-4

    def test_batch_gradient_accumulates(self):
        """NN-010: 批量梯度等于逐行梯度之和"""
        spec = NetworkSpec(2, (5,), 1)
        params = _network(spec, 9)
        x = np.random.default_rng(2).normal(size=(4, 2))
        _, tape = forward(spec, params, x)
        batch = backward(tape, np.ones((4, 1))).grads
        parts = []
        for r in range(4):
            _, t = forward(spec, params, x[r])
            parts.append(backward(t, np.ones(1)).grads)
        total = merge_grads(*parts)
        for name in batch:
            np.testing.assert_allclose(batch[name], total[name], rtol=1e-12, atol=1e-12)

    def test_tape_single_use(self):
        """NN-011: tape 只能反向一次"""
        spec = NetworkSpec(2, (3,), 1)
        params = _network(spec, 0)
        _, tape = forward(spec, params, np.ones(2))
        backward(tape, np.ones(1))
        with pytest.raises(UsageError):
            backward(tape, np.ones(1))

    def test_stale_tape_rejected(self):
        """NN-012: 参数更新后旧 tape 过期"""
        spec = NetworkSpec(2, (3,), 1)
        params = _network(spec, 0)
        _, tape = forward(spec, params, np.ones(2))
        sgd_update(params, {"net.b1": np.ones(1)}, 0.1)
        with pytest.raises(UsageError):
            backward(tape, np.ones(1))


class TestUpdates:
    """参数更新"""

    def test_sgd_scalar_example(self):
        """NN-013: p=1, g=2, lr=0.01 → 0.98"""
        params = ParameterSet()
        params.add("p", np.array([1.0]), Partition.VALUE)
        sgd_update(params, {"p": np.array([2.0])}, 0.01)
        assert params["p"][0] == pytest.approx(0.98, abs=1e-15)

    def test_partition_isolation(self):
        """NN-014: 只更新所选分区，另一分区逐比特不变"""
        params = ParameterSet()
        spec = NetworkSpec(2, (3,), 1)
        params.add_network(spec, "v", Partition.VALUE, np.random.default_rng(0))
        params.add_network(spec, "a", Partition.ADVANTAGE, np.random.default_rng(1))
        before = {n: params[n].copy() for n in params.names()}
        grads = {n: np.ones_like(params[n]) for n in params.names()}

        sgd_update(params, grads, 0.1, Partition.VALUE)
        for n in params.names(Partition.ADVANTAGE):
            assert params[n].tobytes() == before[n].tobytes()
        assert any(not np.array_equal(params[n], before[n]) for n in params.names(Partition.VALUE))

        Adam().step(params, grads, 0.1, Partition.ADVANTAGE)
        for n in params.names(Partition.VALUE):
            assert np.array_equal(params[n], before[n] - 0.1)

    def test_adam_first_step(self):
        """NN-015: Adam 第一步的更新量约为 lr·sign(g)"""
        params = ParameterSet()
        params.add("p", np.array([1.0, -1.0]), Partition.ADVANTAGE)
        Adam().step(params, {"p": np.array([3.0, -0.5])}, 0.01)
        np.testing.assert_allclose(params["p"], [0.99, -0.99], atol=1e-8)

    def test_make_optimizer(self):
        """NN-016: 按名字创建优化器"""
        assert make_optimizer("sgd").name == "sgd"
        assert make_optimizer("adam").name == "adam"
        with pytest.raises(UsageError):
            make_optimizer("rmsprop")

    def test_clip_by_global_norm(self):
        """NN-017: 全局范数裁剪"""
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert global_norm(grads) == pytest.approx(5.0)
        clipped = clip_by_global_norm(grads, 1.0)
        assert global_norm(clipped) == pytest.approx(1.0)
        assert clip_by_global_norm(grads, 0.0) is grads

    def test_flat_round_trip(self):
        """NN-018: flat / load_flat 保持顺序"""
        params = ParameterSet()
        params.add_network(NetworkSpec(2, (3,), 1), "v", Partition.VALUE, np.random.default_rng(0))
        vector = params.flat() * 2.0
        params.load_flat(vector)
        assert np.array_equal(params.flat(), vector)
        with pytest.raises(UsageError):
            params.load_flat(vector[:-1])
