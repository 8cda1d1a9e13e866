#!/usr/bin/env python3
"""
回归模型测试：回归树、随机森林、岭回归、堆叠模型、评估与划分
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from feature_builder import FeatureRow
from ml import (TreeParams, ForestParams, ModelError, fit_tree, grow_tree, fit_forest, fit_ridge, fit_stacked,
                regression_metrics, evaluate, split, design_matrix, labels)
from settings import RunConfig, ConfigError


def _reference_tree(X, y, depth, max_depth, min_leaf):
    """穷举切分的参考实现，返回嵌套元组 (特征, 阈值, 左, 右) 或叶值"""
    if depth >= max_depth or len(y) < 2 * min_leaf or np.ptp(y) == 0:
        return float(np.mean(y))
    parent = float(np.sum((y - y.mean()) ** 2))
    best = (math.inf, None, None)
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = (lo + hi) / 2.0
            if thr >= hi:
                thr = lo
            mask = X[:, f] <= thr
            if mask.sum() < min_leaf or (~mask).sum() < min_leaf:
                continue
            sse = float(np.sum((y[mask] - y[mask].mean()) ** 2) + np.sum((y[~mask] - y[~mask].mean()) ** 2))
            if sse < best[0]:
                best = (sse, f, thr)
    if best[1] is None or not best[0] < parent - 1e-12 * parent:
        return float(np.mean(y))
    _, f, thr = best
    mask = X[:, f] <= thr
    return (f, thr,
            _reference_tree(X[mask], y[mask], depth + 1, max_depth, min_leaf),
            _reference_tree(X[~mask], y[~mask], depth + 1, max_depth, min_leaf))


def _as_tuple(node):
    if node.is_leaf:
        return node.prediction
    return (node.feature_index, node.threshold, _as_tuple(node.left), _as_tuple(node.right))


def _assert_same_tree(a, b):
    if isinstance(a, tuple):
        assert isinstance(b, tuple)
        assert a[0] == b[0] and a[1] == b[1]
        _assert_same_tree(a[2], b[2])
        _assert_same_tree(a[3], b[3])
    else:
        assert not isinstance(b, tuple)
        assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_depth_two_tree_matches_exhaustive_search():
    """测试深度2的树与穷举切分参考实现完全一致"""
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.normal(size=(50, 3))
        y = 2 * X[:, 0] - X[:, 1] ** 2 + rng.normal(scale=0.3, size=50)
        params = TreeParams(mtry=3, min_samples_leaf=1, max_depth=2)
        tree = fit_tree(X, y, params, np.random.default_rng(1))
        _assert_same_tree(_as_tuple(tree), _reference_tree(X, y, 0, 2, 1))
    print("✓ 穷举切分比对测试通过")


def test_tied_splits_pick_lowest_feature():
    """测试不同特征给出相同划分时取下标最小的特征"""
    rng = np.random.default_rng(12)
    for _ in range(30):
        x0 = rng.normal(size=40)
        # 第1列是第0列的倒序映射，每个切分的左右划分与第0列某个切分完全相同
        X = np.column_stack([x0, -3.0 * x0 + 1.0, rng.normal(size=40)])
        y = np.sin(2 * x0) + rng.normal(scale=0.5, size=40)
        params = TreeParams(mtry=3, min_samples_leaf=1, max_depth=4)
        flat = grow_tree(X, y, params, np.random.default_rng(2))
        assert 1 not in set(flat.feature.tolist())
        _assert_same_tree(_as_tuple(flat.to_node()), _reference_tree(X, y, 0, 4, 1))


def test_small_nodes_match_exhaustive_search():
    """测试小样本深树（大量并列候选）与穷举参考一致"""
    rng = np.random.default_rng(13)
    for _ in range(100):
        X = rng.integers(0, 4, size=(12, 3)).astype(float)
        y = rng.normal(size=12)
        params = TreeParams(mtry=3, min_samples_leaf=1, max_depth=3)
        tree = fit_tree(X, y, params, np.random.default_rng(3))
        _assert_same_tree(_as_tuple(tree), _reference_tree(X, y, 0, 3, 1))


def test_tree_routing_and_flat_prediction():
    """测试每个训练点恰好到达一个叶节点，数组预测与节点预测一致"""
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(200, 4))
    y = X[:, 0] * 10 + rng.normal(size=200)
    flat = grow_tree(X, y, TreeParams(mtry=2, min_samples_leaf=5), np.random.default_rng(3))
    root = flat.to_node()
    preds = flat.predict(X)
    for i in range(len(X)):
        leaf = root.route(X[i])
        assert leaf.is_leaf
        assert leaf.prediction == preds[i]


def test_tree_min_leaf_and_constant_target():
    X = np.arange(20, dtype=float)[:, None]
    flat = grow_tree(X, X[:, 0], TreeParams(min_samples_leaf=5), np.random.default_rng(0))
    root = flat.to_node()

    def leaf_sizes(node, rows):
        if node.is_leaf:
            return [len(rows)]
        mask = rows[:, node.feature_index] <= node.threshold
        return leaf_sizes(node.left, rows[mask]) + leaf_sizes(node.right, rows[~mask])

    assert min(leaf_sizes(root, X)) >= 5

    constant = grow_tree(X, np.full(20, 3.0), TreeParams(), np.random.default_rng(0))
    assert len(constant) == 1 and constant.value[0] == 3.0


def test_fit_rejects_bad_input():
    with pytest.raises(ModelError):
        fit_tree(np.empty((0, 2)), np.empty(0), TreeParams(), np.random.default_rng(0))
    with pytest.raises(ModelError):
        fit_forest(np.array([[np.nan]]), np.array([1.0]), ForestParams(n_estimators=2), seed=1)


def test_forest_fits_noiseless_linear_signal():
    """测试无噪声 y = 3x₁ + x₂ 上测试集 R² > 0.9"""
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(700, 2))
    y = 3 * X[:, 0] + X[:, 1]
    model = fit_forest(X[:500], y[:500], ForestParams(n_estimators=200, min_samples_leaf=5), seed=42, n_jobs=2)
    metrics = regression_metrics(y[500:], model.predict(X[500:]))
    assert metrics['r2'] > 0.9
    assert len(model.trees) == 200
    assert model.mtry == 1
    print("✓ 随机森林精度测试通过")


def test_forest_reproducible_across_workers():
    """测试相同种子重跑逐位一致，且与并行度无关"""
    rng = np.random.default_rng(5)
    X = rng.normal(size=(150, 5))
    y = X[:, 0] - X[:, 2] + rng.normal(scale=0.1, size=150)
    params = ForestParams(n_estimators=12, min_samples_leaf=3)
    one = fit_forest(X, y, params, seed=7, n_jobs=1)
    many = fit_forest(X, y, params, seed=7, n_jobs=3)
    again = fit_forest(X, y, params, seed=7, n_jobs=1)
    other = fit_forest(X, y, params, seed=8, n_jobs=1)
    np.testing.assert_array_equal(one.predict(X), many.predict(X))
    np.testing.assert_array_equal(one.predict(X), again.predict(X))
    assert not np.array_equal(one.predict(X), other.predict(X))

    # 森林预测为各树预测的平均
    per_tree = np.mean([t.predict(X) for t in one.trees], axis=0)
    np.testing.assert_allclose(one.predict(X), per_tree, rtol=1e-12)


def test_ridge_matches_normal_equations():
    """测试 λ=0 时与正规方程结果在1e-8相对误差内一致"""
    rng = np.random.default_rng(6)
    for _ in range(20):
        n, p = int(rng.integers(30, 80)), int(rng.integers(2, 6))
        X = rng.normal(size=(n, p)) * rng.uniform(0.5, 5, size=p) + rng.normal(size=p)
        y = X @ rng.normal(size=p) + 3.0 + rng.normal(size=n)
        model = fit_ridge(X, y, lam=0.0)
        A = np.column_stack([np.ones(n), X])
        expected = np.linalg.solve(A.T @ A, A.T @ y)
        np.testing.assert_allclose(model.coefficients, expected[1:], rtol=1e-8)
        assert model.intercept == pytest.approx(expected[0], rel=1e-8)
    print("✓ 岭回归正规方程比对测试通过")


def test_ridge_coefficient_norm_shrinks_with_lambda():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(60, 4))
    y = X @ np.array([1.0, -2.0, 0.5, 3.0]) + rng.normal(size=60)
    norms = [np.linalg.norm(fit_ridge(X, y, lam).std_coefficients) for lam in (0.01, 0.1, 1, 10, 100)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


def test_ridge_constant_column_and_singular_system():
    """测试常数列系数为0、λ=0奇异时报错"""
    rng = np.random.default_rng(8)
    X = np.column_stack([rng.normal(size=40), np.full(40, 5.0)])
    y = 2 * X[:, 0] + 1
    model = fit_ridge(X, y, lam=0.1)
    assert model.coefficients[1] == 0.0

    duplicated = np.column_stack([X[:, 0], X[:, 0]])
    with pytest.raises(ModelError):
        fit_ridge(duplicated, y, lam=0.0)
    with pytest.raises(ModelError):
        fit_ridge(X[:1], y[:1], lam=1.0)
    with pytest.raises(ConfigError):
        fit_ridge(X, y, lam=-1.0)


def _rows(static, dynamic, y):
    return [FeatureRow(property_id=f"r{i:04d}", kind='residential', price=float(y[i]),
                       static_features=np.asarray(static[i], dtype=float),
                       dynamic_features=np.asarray(dynamic[i], dtype=float), label=float(y[i]))
            for i in range(len(y))]


def test_stacked_model_on_perfect_base_learners():
    """测试两个基学习器都完美时元系数之和≈1、测试MSE≈0"""
    rng = np.random.default_rng(9)
    x = np.concatenate([rng.uniform(0.0, 0.4, 150), rng.uniform(0.6, 1.0, 150)])
    rng.shuffle(x)
    y = np.where(x > 0.5, 10.0, 0.0)
    rows = _rows(x[:, None], x[:, None], y)
    config = RunConfig(n_estimators=10, min_samples_leaf=1, k_folds=5, ridge_lambda=1e-6, seed=3)
    train, test = rows[:250], rows[250:]

    model = fit_stacked(train, config, n_jobs=1)
    assert len(model.meta.coefficients) == 2
    assert float(np.sum(model.meta.coefficients)) == pytest.approx(1.0, abs=1e-3)
    assert evaluate(model, test)['mse'] == pytest.approx(0.0, abs=1e-6)
    assert not model.baseline
    assert model.rf_a.block == 'static' and model.rf_b.block == 'dynamic'

    X_all = design_matrix(test, 'all')
    np.testing.assert_array_equal(model.predict(X_all), model.predict_rows(test))


def test_stacked_baseline_uses_static_for_both():
    rng = np.random.default_rng(10)
    static = rng.normal(size=(60, 3))
    dynamic = rng.normal(size=(60, 5))
    y = static[:, 0] + dynamic[:, 0]
    rows = _rows(static, dynamic, y)
    config = RunConfig(n_estimators=4, k_folds=3, seed=1)
    model = fit_stacked(rows, config, baseline=True, n_jobs=1)
    assert model.baseline
    assert model.rf_b.block == 'static'
    assert model.n_static == 3

    again = fit_stacked(rows, config, baseline=True, n_jobs=2)
    np.testing.assert_array_equal(model.predict_rows(rows), again.predict_rows(rows))

    with pytest.raises(ModelError):
        fit_stacked(rows[:2], config)


def test_regression_metrics_formula():
    """测试评估指标与直接公式一致"""
    rng = np.random.default_rng(11)
    y = rng.normal(size=30)
    pred = y + rng.normal(scale=0.5, size=30)
    metrics = regression_metrics(y, pred)
    mse = np.mean((y - pred) ** 2)
    assert metrics['mse'] == pytest.approx(mse, rel=1e-12)
    assert metrics['r2'] == pytest.approx(1 - mse / np.var(y), rel=1e-12)

    assert regression_metrics([1.0, 1.0], [1.0, 2.0])['r2'] is None
    assert regression_metrics([1.0, 2.0], [1.0, 2.0]) == {'mse': 0.0, 'r2': 1.0}
    with pytest.raises(ModelError):
        regression_metrics([], [])


def test_split_sizes_and_determinism():
    """测试训练/测试划分"""
    rows = list(range(10))
    train, test = split(rows, 0.1, seed=42)
    assert len(test) == 1 and len(train) == 9
    assert sorted(train + test) == rows
    assert split(rows, 0.1, seed=42) == (train, test)
    assert split(rows, 0.1, seed=43) != (train, test)

    assert len(split(list(range(3)), 0.5, 0)[1]) == 2
    assert len(split([0, 1], 0.9, 0)[1]) == 1
    assert len(split(list(range(20)), 0.3, 0)[1]) == 6
    with pytest.raises(ConfigError):
        split(rows, 1.0, 0)
    with pytest.raises(ModelError):
        split([0], 0.5, 0)


def test_labels_require_values():
    rows = _rows(np.zeros((2, 1)), np.zeros((2, 1)), [1.0, 2.0])
    np.testing.assert_array_equal(labels(rows), [1.0, 2.0])
    rows[0].label = None
    with pytest.raises(ModelError):
        labels(rows)
