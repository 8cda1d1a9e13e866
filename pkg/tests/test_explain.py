#!/usr/bin/env python3
"""
特征归因测试
"""

import itertools
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.stats import spearmanr

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from explain import (AttributionReport, shapley_mc, top_k_report, permutation_importance, write_report_csv,
                     write_instance_matrix, write_permutation_csv)
from ml import ForestParams, ModelError, fit_forest


class LinearModel:
    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=float)
        self.b = b

    def predict(self, X):
        # 逐列求和，零权重特征的预测差严格为0
        return (np.atleast_2d(X) * self.w).sum(axis=1) + self.b


def _exact_shapley(predict, x, background):
    """穷举全部排列与背景行，返回 (精确值, 各特征边际贡献的标准差)"""
    p = len(x)
    contributions = [[] for _ in range(p)]
    for perm in itertools.permutations(range(p)):
        for z in background:
            current = z.copy()
            prev = float(predict(current[None, :])[0])
            for j in perm:
                current[j] = x[j]
                value = float(predict(current[None, :])[0])
                contributions[j].append(value - prev)
                prev = value
    return np.array([np.mean(c) for c in contributions]), np.array([np.std(c) for c in contributions])


def test_linear_model_matches_analytic_value():
    """测试线性模型的Shapley值等于 w·(x − z)"""
    model = LinearModel([2.0, -1.0, 0.5, 0.0], b=3.0)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    z = np.array([0.5, 0.5, 0.5, 0.5])
    phi = shapley_mc(model.predict, x, z[None, :], n_samples=50, seed=1)
    np.testing.assert_allclose(phi, model.w * (x - z), atol=1e-12)

    rng = np.random.default_rng(2)
    background = rng.normal(size=(64, 4))
    n = 4000
    phi = shapley_mc(model.predict, x, background, n_samples=n, seed=3)
    expected = model.w * (x - background.mean(axis=0))
    tolerance = 5 * np.abs(model.w) * background.std(axis=0) / np.sqrt(n) + 1e-12
    assert np.all(np.abs(phi - expected) <= tolerance)
    assert phi[3] == 0.0
    print("✓ 线性模型解析值测试通过")


def test_forest_matches_exhaustive_enumeration():
    """测试3特征森林在8行背景数据上与穷举结果一致"""
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(200, 3))
    y = 4 * X[:, 0] + 2 * X[:, 1] * X[:, 2]
    forest = fit_forest(X, y, ForestParams(n_estimators=10, min_samples_leaf=5), seed=5, n_jobs=1)
    background = X[:8]
    x = X[100]
    exact, spread = _exact_shapley(forest.predict, x, background)
    n = 4000
    phi = shapley_mc(forest.predict, x, background, n_samples=n, seed=6)
    assert np.all(np.abs(phi - exact) <= 5 * spread / np.sqrt(n) + 1e-9)


def test_efficiency_residual_within_standard_errors():
    """测试 Σφ 与 f(x) − E[f(z)] 的差在标准误范围内"""
    rng = np.random.default_rng(7)
    X = rng.uniform(size=(300, 3))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2 - X[:, 2]
    forest = fit_forest(X, y, ForestParams(n_estimators=10), seed=8, n_jobs=1)
    background = X[:64]
    f_bg = forest.predict(background)
    n = 2000
    se = f_bg.std() / np.sqrt(n)
    z_scores = []
    for i in range(50):
        x = X[100 + i]
        phi = shapley_mc(forest.predict, x, background, n_samples=n, seed=i)
        residual = phi.sum() - (forest.predict(x[None, :])[0] - f_bg.mean())
        z_scores.append(abs(residual) / se)
    z_scores = np.array(z_scores)
    assert np.all(z_scores <= 4.0)
    assert np.sum(z_scores > 3.0) <= 2


def test_shapley_deterministic_and_validated():
    model = LinearModel([1.0, 2.0])
    background = np.random.default_rng(0).normal(size=(10, 2))
    a = shapley_mc(model.predict, [1.0, 1.0], background, 20, seed=11)
    b = shapley_mc(model.predict, [1.0, 1.0], background, 20, seed=11)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ModelError):
        shapley_mc(model.predict, [1.0, 1.0], np.empty((0, 2)), 20, seed=1)
    with pytest.raises(ModelError):
        shapley_mc(model.predict, [1.0, 1.0], background, 0, seed=1)


def test_top_k_report_ranking_and_parallel_invariance():
    """测试全局排名、并列按名称，且与并行度无关"""
    model = LinearModel([3.0, 0.0, -1.0, 0.0])
    rng = np.random.default_rng(9)
    X = rng.normal(size=(12, 4))
    background = rng.normal(size=(20, 4))
    names = ['beta', 'delta', 'alpha', 'gamma']
    one = top_k_report(model.predict, X, background, names, k=3, n_samples=30, seed=42, n_jobs=1)
    two = top_k_report(model.predict, X, background, names, k=3, n_samples=30, seed=42, n_jobs=2)
    np.testing.assert_array_equal(one.values, two.values)

    ranking = one.ranking()
    assert [name for _, name, _ in ranking] == ['beta', 'alpha', 'delta', 'gamma']
    assert [rank for rank, _, _ in ranking] == [1, 2, 3, 4]
    assert len(one.top()) == 3
    assert one.values.shape == (12, 4)
    assert one.baseline == pytest.approx(float(model.predict(background).mean()))
    np.testing.assert_allclose(one.importance, np.abs(one.values).mean(axis=0))

    with pytest.raises(ModelError):
        top_k_report(model.predict, X, background, names[:3], k=3, n_samples=5, seed=1)


def test_permutation_importance():
    """测试未使用的特征置换重要性为0"""
    model = LinearModel([2.0, 0.0, 1.0])
    rng = np.random.default_rng(10)
    X = rng.normal(size=(100, 3))
    y = model.predict(X)
    delta = permutation_importance(model.predict, X, y, seed=3, n_repeats=5)
    assert delta[1] == 0.0
    assert delta[0] > delta[2] > 0
    np.testing.assert_array_equal(delta, permutation_importance(model.predict, X, y, seed=3, n_repeats=5))
    with pytest.raises(ModelError):
        permutation_importance(model.predict, X[:1], y[:1], seed=3)


def test_report_writers():
    """测试归因结果文件格式"""
    report = AttributionReport(feature_names=['a', 'b'], importance=np.array([0.5, 1.5]),
                               signed_mean=np.array([-0.5, 1.0]), values=np.array([[-1.0, 1.0], [0.0, 1.0]]),
                               instance_ids=['p1', 'p2'], n_mc_samples=10, seed=1, baseline=0.0, k=2)
    with tempfile.TemporaryDirectory() as temp_dir:
        top_path = os.path.join(temp_dir, 'shapley_top.csv')
        write_report_csv(report, top_path)
        top = pd.read_csv(top_path)
        assert list(top.columns) == ['rank', 'feature', 'mean_abs_shapley']
        assert list(top['feature']) == ['b', 'a']

        inst_path = os.path.join(temp_dir, 'shapley_instances.csv')
        write_instance_matrix(report, inst_path)
        inst = pd.read_csv(inst_path)
        assert list(inst['instance_id']) == ['p1', 'p2', 'mean_signed']
        assert inst['a'].iloc[-1] == -0.5

        perm_path = os.path.join(temp_dir, 'permutation_importance.csv')
        write_permutation_csv(['a', 'b', 'c'], np.array([0.1, 0.3, 0.1]), perm_path)
        perm = pd.read_csv(perm_path)
        assert list(perm['feature']) == ['b', 'a', 'c']
        assert list(perm['rank']) == [1, 2, 3]


def test_shapley_ranking_agrees_with_permutation_importance():
    """测试森林上Shapley全局重要性与置换重要性的排序一致（Spearman > 0.7）"""
    rng = np.random.default_rng(12)
    X = rng.normal(size=(400, 6))
    y = X @ np.array([6.0, 4.0, 2.5, 1.5, 0.5, 0.0]) + rng.normal(0, 0.1, size=400)
    forest = fit_forest(X[:300], y[:300], ForestParams(n_estimators=30, min_samples_leaf=3), seed=13, n_jobs=1)
    names = [f'x{j}' for j in range(6)]
    report = top_k_report(forest.predict, X[300:340], X[:64], names, k=6, n_samples=100, seed=14, n_jobs=1)
    delta = permutation_importance(forest.predict, X[300:], y[300:], seed=15, n_repeats=3)
    rho, _ = spearmanr(report.importance, delta)
    assert rho > 0.7
    assert report.ranking()[0][1] == 'x0'
    print("✓ Shapley与置换重要性一致性测试通过")
