"""
特征归因模块
与模型无关的蒙特卡洛Shapley值与置换重要性
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from loader import TableLoader
from ml import ModelError, regression_metrics
from parallel import chunked, resolve_n_jobs
from seeds import derive_seed, rng_for

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

Predictor = Callable[[np.ndarray], np.ndarray]

# 单次模型调用的混合样本行数上限
_MAX_BATCH_ROWS = 50_000


@dataclass
class AttributionReport:
    """归因报告"""
    feature_names: List[str]
    importance: np.ndarray
    signed_mean: np.ndarray
    values: np.ndarray
    instance_ids: List[str]
    n_mc_samples: int
    seed: int
    baseline: float
    k: int

    def ranking(self) -> List[Tuple[int, str, float]]:
        """按 mean|φ| 降序，并列按特征名"""
        order = sorted(range(len(self.feature_names)),
                       key=lambda j: (-self.importance[j], self.feature_names[j]))
        return [(rank + 1, self.feature_names[j], float(self.importance[j])) for rank, j in enumerate(order)]

    def top(self, k: Optional[int] = None) -> List[Tuple[int, str, float]]:
        return self.ranking()[:k or self.k]


def shapley_mc(predict: Predictor, x, background, n_samples: int, seed) -> np.ndarray:
    """
    置换采样Shapley估计

    每个样本抽取一个特征排列和一行背景数据 z，沿排列依次把 z 的特征替换为 x 的特征，
    相邻混合样本的预测差累加到对应特征。同一排列的全部混合样本一次批量预测。

    Args:
        predict: 预测函数 X -> y
        x: 待解释样本
        background: 背景数据行
        n_samples: 采样次数
        seed: 整数种子或 numpy Generator

    Returns:
        各特征的Shapley估计

    Raises:
        ModelError: 背景数据为空或采样次数小于1
    """
    x = np.asarray(x, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if background.size == 0 or len(background) == 0:
        raise ModelError("Shapley attribution needs a nonempty background set")
    if n_samples < 1:
        raise ModelError("n_samples must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = len(x)
    # 第 k 行取排列中前 k 个特征自 x
    steps = np.tri(p + 1, p, -1, dtype=bool)

    perms = np.empty((n_samples, p), dtype=np.int64)
    picks = np.empty(n_samples, dtype=np.int64)
    for s in range(n_samples):
        perms[s] = rng.permutation(p)
        picks[s] = rng.integers(len(background))

    phi = np.zeros(p)
    per_batch = max(1, _MAX_BATCH_ROWS // (p + 1))
    for start in range(0, n_samples, per_batch):
        block = range(start, min(n_samples, start + per_batch))
        hybrids = np.empty((len(block), p + 1, p))
        for b, s in enumerate(block):
            mask = np.empty((p + 1, p), dtype=bool)
            mask[:, perms[s]] = steps
            hybrids[b] = np.where(mask, x, background[picks[s]])
        f = np.asarray(predict(hybrids.reshape(-1, p)), dtype=float).reshape(len(block), p + 1)
        deltas = np.diff(f, axis=1)
        for b, s in enumerate(block):
            phi[perms[s]] += deltas[b]
    return phi / n_samples


def _explain_batch(predict: Predictor, X: np.ndarray, indices: List[int], background: np.ndarray,
                   n_samples: int, seed: int) -> List[np.ndarray]:
    return [shapley_mc(predict, X[i], background, n_samples, derive_seed(seed, 'shapley', i)) for i in indices]


def top_k_report(predict: Predictor, eval_rows, background, feature_names: Sequence[str], k: int,
                 n_samples: int, seed: int, instance_ids: Optional[Sequence[str]] = None,
                 n_jobs: Optional[int] = None) -> AttributionReport:
    """
    对评估集逐样本计算Shapley值并汇总全局重要性

    每个样本使用由 (seed, 样本序号) 派生的种子，结果与并行度无关。
    """
    X = np.atleast_2d(np.asarray(eval_rows, dtype=float))
    background = np.atleast_2d(np.asarray(background, dtype=float))
    names = list(feature_names)
    if X.shape[1] != len(names):
        raise ModelError(f"{len(names)} feature names for {X.shape[1]} columns")
    batches = chunked(list(range(len(X))), n_jobs)
    results = Parallel(n_jobs=resolve_n_jobs(n_jobs))(
        delayed(_explain_batch)(predict, X, batch, background, n_samples, seed) for batch in batches)
    values = np.vstack([phi for batch in results for phi in batch]) if len(X) else np.zeros((0, len(names)))
    importance = np.abs(values).mean(axis=0) if len(X) else np.zeros(len(names))
    signed = values.mean(axis=0) if len(X) else np.zeros(len(names))
    baseline = float(np.mean(predict(background)))
    ids = list(instance_ids) if instance_ids is not None else [str(i) for i in range(len(X))]
    report = AttributionReport(feature_names=names, importance=importance, signed_mean=signed, values=values,
                               instance_ids=ids, n_mc_samples=n_samples, seed=seed, baseline=baseline,
                               k=min(k, len(names)))
    head = ', '.join(f"{name}={value:.4g}" for _, name, value in report.top(5))
    logger.info(f"Shapley归因完成：{len(X)} 个样本，前5特征 {head}")
    return report


def permutation_importance(predict: Predictor, X, y, seed: int, n_repeats: int = 5) -> np.ndarray:
    """
    置换重要性：逐列按种子打乱后的MSE增量，多次重复取平均

    Raises:
        ModelError: 行数少于2
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(X) < 2:
        raise ModelError("Permutation importance needs at least 2 rows")
    base = regression_metrics(y, predict(X))['mse']
    rng = rng_for(seed, 'permutation')
    delta = np.zeros(X.shape[1])
    for _ in range(n_repeats):
        for j in range(X.shape[1]):
            shuffled = X.copy()
            shuffled[:, j] = X[rng.permutation(len(X)), j]
            delta[j] += regression_metrics(y, predict(shuffled))['mse'] - base
    return delta / n_repeats


def write_report_csv(report: AttributionReport, path: str) -> None:
    """写出 rank,feature,mean_abs_shapley"""
    frame = pd.DataFrame.from_records(report.top(), columns=['rank', 'feature', 'mean_abs_shapley'])
    TableLoader().write(frame, path)


def write_instance_matrix(report: AttributionReport, path: str) -> None:
    """逐样本Shapley矩阵，最后一行为各特征的平均带符号值"""
    frame = pd.DataFrame(report.values, columns=report.feature_names)
    frame.insert(0, 'instance_id', report.instance_ids)
    summary = pd.DataFrame([report.signed_mean], columns=report.feature_names)
    summary.insert(0, 'instance_id', ['mean_signed'])
    TableLoader().write(pd.concat([frame, summary], ignore_index=True), path)


def write_permutation_csv(feature_names: Sequence[str], delta: np.ndarray, path: str) -> None:
    order = sorted(range(len(feature_names)), key=lambda j: (-delta[j], feature_names[j]))
    frame = pd.DataFrame({'rank': range(1, len(order) + 1),
                          'feature': [feature_names[j] for j in order],
                          'delta_mse': [float(delta[j]) for j in order]})
    TableLoader().write(frame, path)
