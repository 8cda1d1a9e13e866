"""
回归模型模块
CART回归树、装袋随机森林、岭回归，以及两个随机森林经岭回归组合的堆叠模型
"""

import math
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed

from loader import DataError
from parallel import chunked, resolve_n_jobs
from seeds import derive_seed, rng_for
from settings import RunConfig, ConfigError

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

BLOCKS = ('static', 'dynamic', 'all')
# 批量预测时每块的 行数×树数 上限
_PREDICT_CELLS = 1 << 20
# 切分SSE的相对并列容差，容差内的候选直接重算SSE后再比较
SPLIT_TIE_RTOL = 1e-9


class ModelError(DataError):
    """模型训练或评估错误"""
    pass


def design_matrix(rows: Sequence, block: str) -> np.ndarray:
    """从特征行取出 static / dynamic / all 块"""
    if block == 'static':
        return np.vstack([r.static_features for r in rows])
    if block == 'dynamic':
        return np.vstack([r.dynamic_features for r in rows])
    if block == 'all':
        return np.vstack([np.concatenate([r.static_features, r.dynamic_features]) for r in rows])
    raise ConfigError(f"Unknown feature block: {block}")


def labels(rows: Sequence) -> np.ndarray:
    y = np.array([r.label for r in rows], dtype=float)
    if np.isnan(y).any():
        raise ModelError("Rows without labels cannot be used for training")
    return y


def _check_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
        raise ModelError(f"Shape mismatch: X {X.shape}, y {y.shape}")
    if len(y) == 0:
        raise ModelError("Cannot fit a model on empty data")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ModelError("Training data contains non-finite values")
    return X, y


# ---------------------------------------------------------------- 回归树

@dataclass
class TreeParams:
    mtry: int = 0
    min_samples_leaf: int = 5
    max_depth: int = 0

    def resolved_mtry(self, n_features: int) -> int:
        if self.mtry <= 0:
            return max(1, math.ceil(n_features / 3))
        return min(self.mtry, n_features)


@dataclass
class TreeNode:
    """树节点：内部节点 x[feature_index] ≤ threshold 走左子树；叶节点只有 prediction"""
    feature_index: int = -1
    threshold: float = 0.0
    left: Optional['TreeNode'] = None
    right: Optional['TreeNode'] = None
    prediction: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return self.prediction is not None

    def route(self, x: Sequence[float]) -> 'TreeNode':
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature_index] <= node.threshold else node.right
        return node

    def predict_one(self, x: Sequence[float]) -> float:
        return self.route(x).prediction


@dataclass
class FlatTree:
    """数组形式的树，feature 为 -1 表示叶节点"""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    def to_node(self) -> TreeNode:
        nodes = [TreeNode() for _ in range(len(self))]
        for i, node in enumerate(nodes):
            if self.feature[i] < 0:
                node.prediction = float(self.value[i])
            else:
                node.feature_index = int(self.feature[i])
                node.threshold = float(self.threshold[i])
                node.left = nodes[self.left[i]]
                node.right = nodes[self.right[i]]
        return nodes[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node]
            go_left = X[rows, np.where(active, f, 0)] <= self.threshold[node]
            node = np.where(active, np.where(go_left, self.left[node], self.right[node]), node)


def _direct_sse(yn: np.ndarray, mask: np.ndarray) -> float:
    yl, yr = yn[mask], yn[~mask]
    return float(np.sum((yl - yl.mean()) ** 2) + np.sum((yr - yr.mean()) ** 2))


def _best_split(Xn: np.ndarray, yn: np.ndarray, features: np.ndarray,
                min_leaf: int) -> Tuple[float, int, float]:
    """
    在候选特征上搜索最优切分

    先用累积和筛出SSE在最小值容差内的候选，再逐个直接计算SSE，
    并列时取特征下标最小、阈值最小者。

    Returns:
        (子节点SSE之和, 特征下标, 阈值)；无合法切分时SSE为inf
    """
    n = len(yn)
    sub = Xn[:, features]
    order = np.argsort(sub, axis=0, kind='mergesort')
    xs = np.take_along_axis(sub, order, axis=0)
    yc = yn - yn.mean()
    ys = yc[order]
    csum = np.cumsum(ys, axis=0)
    csq = np.cumsum(ys * ys, axis=0)
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    sl, ql = csum[:-1], csq[:-1]
    sr, qr = csum[-1] - sl, csq[-1] - ql
    sse = (ql - sl * sl / nl) + (qr - sr * sr / nr)
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    sse = np.where(valid, sse, np.inf)

    lowest = float(sse.min()) if sse.size else math.inf
    if not np.isfinite(lowest):
        return math.inf, -1, 0.0
    # 累积和的舍入误差约为 n·eps·总SSE
    tol = SPLIT_TIE_RTOL * float(csq[-1, 0]) + 1e-300
    best = (math.inf, -1, 0.0)
    for i, j in np.argwhere(sse <= lowest + tol):
        lo, hi = xs[i, j], xs[i + 1, j]
        threshold = (lo + hi) / 2.0
        # 中点舍入到上侧值时改用下侧值，保证 lo 走左、hi 走右
        if threshold >= hi:
            threshold = lo
        f = int(features[j])
        candidate = (_direct_sse(yn, Xn[:, f] <= threshold), f, float(threshold))
        if candidate < best:
            best = candidate
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, params: TreeParams, rng: np.random.Generator) -> FlatTree:
    """用显式栈迭代生长CART树"""
    X, y = _check_xy(X, y)
    p = X.shape[1]
    mtry = params.resolved_mtry(p)
    min_leaf = max(1, params.min_samples_leaf)
    feature: List[int] = [-1]
    threshold: List[float] = [0.0]
    left: List[int] = [-1]
    right: List[int] = [-1]
    value: List[float] = [0.0]

    stack = [(0, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        value[node] = float(yn.mean())
        if (params.max_depth > 0 and depth >= params.max_depth) or len(idx) < 2 * min_leaf \
                or np.ptp(yn) == 0.0:
            continue
        if mtry >= p:
            features = np.arange(p)
        else:
            features = np.sort(rng.choice(p, size=mtry, replace=False))
        Xn = X[idx]
        best, f, thr = _best_split(Xn, yn, features, min_leaf)
        parent = float(np.sum((yn - yn.mean()) ** 2))
        if not best < parent - 1e-12 * parent:
            continue
        mask = Xn[:, f] <= thr
        lid, rid = len(feature), len(feature) + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
        feature[node], threshold[node], left[node], right[node] = f, thr, lid, rid
        stack.append((rid, idx[~mask], depth + 1))
        stack.append((lid, idx[mask], depth + 1))

    return FlatTree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                    np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                    np.array(value, dtype=float))


def fit_tree(X, y, params: TreeParams, rng: np.random.Generator) -> TreeNode:
    """
    贪心CART回归树

    每个节点从 rng 无放回抽取 mtry 个特征，在相邻不同取值的中点中选择使子节点SSE之和最小的切分，
    并列时取特征下标最小、阈值最小者。

    Raises:
        ModelError: 空数据或含非有限值
    """
    return grow_tree(X, y, params, rng).to_node()


# ---------------------------------------------------------------- 随机森林

@dataclass
class ForestParams:
    n_estimators: int = 300
    mtry: int = 0
    min_samples_leaf: int = 5
    max_depth: int = 0

    @classmethod
    def from_config(cls, config: RunConfig, n_estimators: Optional[int] = None) -> 'ForestParams':
        return cls(n_estimators=n_estimators or config.n_estimators, mtry=config.mtry,
                   min_samples_leaf=config.min_samples_leaf, max_depth=config.max_depth)

    def tree_params(self) -> TreeParams:
        return TreeParams(self.mtry, self.min_samples_leaf, self.max_depth)


@dataclass
class ForestModel:
    """随机森林，预测为各树预测的算术平均"""
    trees: List[FlatTree]
    n_estimators: int
    mtry: int
    min_samples_leaf: int
    max_depth: int
    seed: int
    feature_names: List[str] = field(default_factory=list)
    block: str = 'all'
    _packed: Optional[tuple] = field(default=None, init=False, repr=False, compare=False)

    def _pack(self):
        if self._packed is None:
            sizes = [len(t) for t in self.trees]
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
            feature = np.concatenate([t.feature for t in self.trees])
            left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offsets)])
            right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offsets)])
            threshold = np.concatenate([t.threshold for t in self.trees])
            value = np.concatenate([t.value for t in self.trees])
            self._packed = (offsets, feature, threshold, left, right, value)
        return self._packed

    def predict(self, X) -> np.ndarray:
        """所有树并行遍历，按行分块"""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        offsets, feature, threshold, left, right, value = self._pack()
        n_trees = len(offsets)
        out = np.empty(len(X), dtype=float)
        step = max(1, _PREDICT_CELLS // max(1, n_trees))
        for start in range(0, len(X), step):
            Xc = X[start:start + step]
            node = np.broadcast_to(offsets, (len(Xc), n_trees)).copy()
            rows = np.arange(len(Xc))[:, None]
            while True:
                f = feature[node]
                active = f >= 0
                if not active.any():
                    break
                go_left = Xc[rows, np.where(active, f, 0)] <= threshold[node]
                node = np.where(active, np.where(go_left, left[node], right[node]), node)
            out[start:start + step] = value[node].mean(axis=1)
        return out

    def predict_rows(self, rows: Sequence) -> np.ndarray:
        return self.predict(design_matrix(rows, self.block))


def _fit_tree_batch(X, y, params: TreeParams, seed: int, indices: List[int]) -> List[FlatTree]:
    trees = []
    n = len(y)
    for i in indices:
        rng = rng_for(seed, 'tree', i)
        boot = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[boot], y[boot], params, rng))
    return trees


def fit_forest(X, y, params: ForestParams, seed: int, feature_names: Optional[List[str]] = None,
               block: str = 'all', n_jobs: Optional[int] = None) -> ForestModel:
    """
    装袋随机森林

    每棵树使用由 (seed, 树序号) 派生的独立随机流做自助抽样和特征抽取，
    因此并行度不影响结果。
    """
    X, y = _check_xy(X, y)
    if params.n_estimators < 1:
        raise ConfigError("n_estimators must be >= 1")
    tree_params = params.tree_params()
    batches = chunked(list(range(params.n_estimators)), n_jobs)
    results = Parallel(n_jobs=resolve_n_jobs(n_jobs))(
        delayed(_fit_tree_batch)(X, y, tree_params, seed, batch) for batch in batches)
    trees = [t for batch in results for t in batch]
    logger.debug(f"随机森林训练完成：{len(trees)} 棵树，{X.shape[0]} 行，{X.shape[1]} 个特征")
    return ForestModel(trees=trees, n_estimators=params.n_estimators,
                       mtry=tree_params.resolved_mtry(X.shape[1]),
                       min_samples_leaf=params.min_samples_leaf, max_depth=params.max_depth,
                       seed=seed, feature_names=list(feature_names or []), block=block)


# ---------------------------------------------------------------- 岭回归

@dataclass
class RidgeModel:
    """岭回归；coefficients 为原始单位，std_coefficients 为标准化空间系数"""
    coefficients: np.ndarray
    intercept: float
    lam: float
    mean: np.ndarray
    scale: np.ndarray
    std_coefficients: np.ndarray
    standardize: bool = True
    feature_names: List[str] = field(default_factory=list)
    block: str = 'all'

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.coefficients + self.intercept

    def predict_rows(self, rows: Sequence) -> np.ndarray:
        return self.predict(design_matrix(rows, self.block))


def _solve_spd(A: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter('error', scipy.linalg.LinAlgWarning)
        try:
            return scipy.linalg.solve(A, b, assume_a='pos')
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as e:
            hint = " Use ridge_lambda > 0." if lam == 0 else ""
            raise ModelError(f"Singular ridge system (lambda={lam}): {e}.{hint}")


def fit_ridge(X, y, lam: float, standardize: bool = True,
              feature_names: Optional[List[str]] = None, block: str = 'all') -> RidgeModel:
    """
    岭回归

    标准化后求解 (ZᵀZ + λI)β = Zᵀy，截距不受惩罚；常数列的标准差记为1、系数为0。
    standardize=False 时直接在原始X上求解且无截距。

    Raises:
        ModelError: 行数不足2，或 λ=0 时方程组奇异
    """
    X, y = _check_xy(X, y)
    if len(y) < 2:
        raise ModelError("Ridge regression needs at least 2 rows")
    if lam < 0:
        raise ConfigError(f"ridge lambda must be >= 0, got {lam}")
    p = X.shape[1]

    if not standardize:
        beta = _solve_spd(X.T @ X + lam * np.eye(p), X.T @ y, lam)
        return RidgeModel(coefficients=beta, intercept=0.0, lam=lam, mean=np.zeros(p), scale=np.ones(p),
                          std_coefficients=beta.copy(), standardize=False,
                          feature_names=list(feature_names or []), block=block)

    mean = X.mean(axis=0)
    constant = np.ptp(X, axis=0) == 0.0
    scale = X.std(axis=0)
    scale[constant] = 1.0
    Z = (X - mean) / scale
    Z[:, constant] = 0.0
    y_mean = float(y.mean())
    beta = np.zeros(p)
    free = ~constant
    if free.any():
        Zf = Z[:, free]
        beta[free] = _solve_spd(Zf.T @ Zf + lam * np.eye(int(free.sum())), Zf.T @ (y - y_mean), lam)
    coefficients = beta / scale
    intercept = y_mean - float(mean @ coefficients)
    return RidgeModel(coefficients=coefficients, intercept=intercept, lam=lam, mean=mean, scale=scale,
                      std_coefficients=beta, standardize=True,
                      feature_names=list(feature_names or []), block=block)


# ---------------------------------------------------------------- 堆叠模型

@dataclass
class StackedModel:
    """rf_a 使用静态特征，rf_b 使用动态特征（基线模型中同为静态特征），meta 组合两者预测"""
    rf_a: ForestModel
    rf_b: ForestModel
    meta: RidgeModel
    k_folds: int
    n_static: int

    @property
    def baseline(self) -> bool:
        return self.rf_b.block == 'static'

    def predict_blocks(self, X_static, X_dynamic) -> np.ndarray:
        X_b = X_static if self.baseline else X_dynamic
        base = np.column_stack([self.rf_a.predict(X_static), self.rf_b.predict(X_b)])
        return self.meta.predict(base)

    def predict_rows(self, rows: Sequence) -> np.ndarray:
        return self.predict_blocks(design_matrix(rows, 'static'), design_matrix(rows, 'dynamic'))

    def predict(self, X_all) -> np.ndarray:
        """输入为 [静态 | 动态] 拼接矩阵"""
        X_all = np.atleast_2d(np.asarray(X_all, dtype=float))
        return self.predict_blocks(X_all[:, :self.n_static], X_all[:, self.n_static:])


def fit_stacked(rows: Sequence, config: RunConfig, baseline: bool = False,
                feature_names: Optional[Dict[str, List[str]]] = None,
                n_jobs: Optional[int] = None) -> StackedModel:
    """
    训练堆叠模型

    k折（种子打乱）得到 rf_a / rf_b 的折外预测作为元特征，训练岭回归元学习器，
    再用全部训练行重新训练两个随机森林。baseline=True 时 rf_b 也使用静态特征，
    两种变体仅 rf_b 的输入列不同。

    Raises:
        ModelError: 行数少于折数
    """
    k = config.k_folds
    if len(rows) < k:
        raise ModelError(f"Need at least k_folds={k} rows for stacking, got {len(rows)}")
    names = feature_names or {}
    block_b = 'static' if baseline else 'dynamic'
    X_a = design_matrix(rows, 'static')
    X_b = design_matrix(rows, block_b)
    y = labels(rows)
    params = ForestParams.from_config(config)
    seed = config.seed

    folds = np.array_split(rng_for(seed, 'folds').permutation(len(y)), k)
    oof = np.zeros((len(y), 2))
    for f, held in enumerate(folds):
        train_idx = np.concatenate([folds[g] for g in range(k) if g != f])
        a = fit_forest(X_a[train_idx], y[train_idx], params, derive_seed(seed, 'rf_a', 'fold', f), n_jobs=n_jobs)
        b = fit_forest(X_b[train_idx], y[train_idx], params, derive_seed(seed, 'rf_b', 'fold', f), n_jobs=n_jobs)
        oof[held, 0] = a.predict(X_a[held])
        oof[held, 1] = b.predict(X_b[held])

    meta = fit_ridge(oof, y, config.ridge_lambda, feature_names=['rf_a', 'rf_b'])
    rf_a = fit_forest(X_a, y, params, derive_seed(seed, 'rf_a'), names.get('static'), 'static', n_jobs)
    rf_b = fit_forest(X_b, y, params, derive_seed(seed, 'rf_b'), names.get(block_b), block_b, n_jobs)
    logger.info(f"堆叠模型训练完成（{'基线' if baseline else '动态'}）：{len(y)} 行，"
                f"元系数 rf_a={meta.coefficients[0]:.4f} rf_b={meta.coefficients[1]:.4f}")
    return StackedModel(rf_a=rf_a, rf_b=rf_b, meta=meta, k_folds=k, n_static=X_a.shape[1])


# ---------------------------------------------------------------- 评估与划分

def regression_metrics(y_true, y_pred) -> Dict[str, Optional[float]]:
    """mse 与 r2；标签方差为0时 r2 为 None"""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if len(y_true) == 0:
        raise ModelError("Cannot evaluate on empty data")
    resid = y_true - y_pred
    sse = float(resid @ resid)
    centered = y_true - y_true.mean()
    sst = float(centered @ centered)
    return {'mse': sse / len(y_true), 'r2': None if sst == 0.0 else 1.0 - sse / sst}


def evaluate(model, rows: Sequence) -> Dict[str, Optional[float]]:
    """在标签空间计算 {mse, r2}"""
    if not rows:
        raise ModelError("Cannot evaluate on empty data")
    return regression_metrics(labels(rows), model.predict_rows(rows))


def split(rows: Sequence, test_fraction: float, seed: int) -> Tuple[list, list]:
    """
    种子打乱后前 ⌈n·test_fraction⌉ 行为测试集（至多 n−1 行）

    Raises:
        ConfigError: test_fraction 不在 (0, 1)
        ModelError: 行数少于2
    """
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(rows)
    if n < 2:
        raise ModelError(f"Need at least 2 rows to split, got {n}")
    n_test = min(n - 1, max(1, math.ceil(round(n * test_fraction, 9))))
    order = rng_for(seed, 'split').permutation(n)
    test = [rows[i] for i in order[:n_test]]
    train = [rows[i] for i in order[n_test:]]
    return train, test
