"""
模型持久化模块
版本化的逐行文本格式，浮点数以 float.hex 写出，重新加载后预测逐位一致
"""

import os
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Union

import numpy as np

from feature_builder import FeatureManifest
from ml import FlatTree, ForestModel, RidgeModel, StackedModel, ModelError
from settings import PIPELINE_VERSION

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

FORMAT_HEADER = 'valuation-model'
FORMAT_VERSION = 1

Model = Union[ForestModel, RidgeModel, StackedModel]


@dataclass
class ModelArtifact:
    """模型文件内容：模型、特征清单（含填补值）与配置摘要"""
    model: Model
    manifest: Optional[FeatureManifest] = None
    config_digest: str = ''
    pipeline_version: str = PIPELINE_VERSION


def _hex(value: float) -> str:
    return float(value).hex()


def _forest_lines(name: str, forest: ForestModel) -> List[str]:
    lines = [f"forest {name} n_estimators={forest.n_estimators} mtry={forest.mtry} "
             f"min_samples_leaf={forest.min_samples_leaf} max_depth={forest.max_depth} "
             f"seed={forest.seed} block={forest.block} n_features={len(forest.feature_names)}"]
    lines += [f"feature {n}" for n in forest.feature_names]
    for i, tree in enumerate(forest.trees):
        lines.append(f"tree {i} {len(tree)}")
        for k in range(len(tree)):
            lines.append(f"{int(tree.feature[k])} {_hex(tree.threshold[k])} {int(tree.left[k])} "
                         f"{int(tree.right[k])} {_hex(tree.value[k])}")
    lines.append("end forest")
    return lines


def _ridge_lines(name: str, ridge: RidgeModel) -> List[str]:
    p = len(ridge.coefficients)
    names = ridge.feature_names or [f"x{j}" for j in range(p)]
    lines = [f"ridge {name} lambda={_hex(ridge.lam)} standardize={int(ridge.standardize)} "
             f"block={ridge.block} n_features={p}",
             f"intercept {_hex(ridge.intercept)}"]
    for j in range(p):
        lines.append(f"coef {names[j]} {_hex(ridge.coefficients[j])} {_hex(ridge.mean[j])} "
                     f"{_hex(ridge.scale[j])} {_hex(ridge.std_coefficients[j])}")
    lines.append("end ridge")
    return lines


def _manifest_lines(manifest: FeatureManifest) -> List[str]:
    lines = [f"manifest version={manifest.version}"]
    for block, names, values in (('static', manifest.static_names, manifest.static_impute),
                                 ('dynamic', manifest.dynamic_names, manifest.dynamic_impute)):
        lines += [f"impute {block} {n} {_hex(v)}" for n, v in zip(names, values)]
    lines.append("end manifest")
    return lines


def save_model(artifact: ModelArtifact, path: str) -> None:
    """写出模型文件"""
    model = artifact.model
    lines = [f"{FORMAT_HEADER} {FORMAT_VERSION}",
             f"pipeline_version {artifact.pipeline_version}",
             f"config_digest {artifact.config_digest or '-'}"]
    if isinstance(model, StackedModel):
        lines.append(f"stacked k_folds={model.k_folds} n_static={model.n_static}")
        lines += _forest_lines('rf_a', model.rf_a)
        lines += _forest_lines('rf_b', model.rf_b)
        lines += _ridge_lines('meta', model.meta)
    elif isinstance(model, ForestModel):
        lines.append("single")
        lines += _forest_lines('model', model)
    elif isinstance(model, RidgeModel):
        lines.append("single")
        lines += _ridge_lines('model', model)
    else:
        raise ModelError(f"Unsupported model type: {type(model).__name__}")
    if artifact.manifest is not None:
        lines += _manifest_lines(artifact.manifest)
    lines.append("end model")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info(f"模型已保存: {path}")


class _Reader:
    """逐行读取，出错时报告行号"""

    def __init__(self, path: str, lines: List[str]):
        self.path = path
        self.lines = lines
        self.pos = 0

    def next(self) -> List[str]:
        if self.pos >= len(self.lines):
            raise ModelError(f"{self.path}: unexpected end of model file")
        self.pos += 1
        return self.lines[self.pos - 1].split()

    def expect(self, *head: str) -> List[str]:
        tokens = self.next()
        if tokens[:len(head)] != list(head):
            raise ModelError(f"{self.path}:{self.pos}: expected {' '.join(head)!r}, got {' '.join(tokens)!r}")
        return tokens

    def peek(self) -> List[str]:
        return self.lines[self.pos].split() if self.pos < len(self.lines) else []


def _options(tokens: List[str]) -> dict:
    return dict(t.split('=', 1) for t in tokens if '=' in t)


def _read_forest(reader: _Reader, name: str) -> ForestModel:
    opts = _options(reader.expect('forest', name))
    names = [reader.expect('feature')[1] for _ in range(int(opts['n_features']))]
    trees = []
    for i in range(int(opts['n_estimators'])):
        size = int(reader.expect('tree', str(i))[2])
        rows = [reader.next() for _ in range(size)]
        trees.append(FlatTree(
            feature=np.array([int(r[0]) for r in rows], dtype=np.int64),
            threshold=np.array([float.fromhex(r[1]) for r in rows], dtype=float),
            left=np.array([int(r[2]) for r in rows], dtype=np.int64),
            right=np.array([int(r[3]) for r in rows], dtype=np.int64),
            value=np.array([float.fromhex(r[4]) for r in rows], dtype=float),
        ))
    reader.expect('end', 'forest')
    return ForestModel(trees=trees, n_estimators=int(opts['n_estimators']), mtry=int(opts['mtry']),
                       min_samples_leaf=int(opts['min_samples_leaf']), max_depth=int(opts['max_depth']),
                       seed=int(opts['seed']), feature_names=names, block=opts['block'])


def _read_ridge(reader: _Reader, name: str) -> RidgeModel:
    opts = _options(reader.expect('ridge', name))
    intercept = float.fromhex(reader.expect('intercept')[1])
    rows = [reader.expect('coef') for _ in range(int(opts['n_features']))]
    reader.expect('end', 'ridge')

    def column(k: int) -> np.ndarray:
        return np.array([float.fromhex(r[k]) for r in rows], dtype=float)

    return RidgeModel(coefficients=column(2), intercept=intercept, lam=float.fromhex(opts['lambda']),
                      mean=column(3), scale=column(4), std_coefficients=column(5),
                      standardize=opts['standardize'] == '1', feature_names=[r[1] for r in rows],
                      block=opts['block'])


def _read_manifest(reader: _Reader) -> FeatureManifest:
    opts = _options(reader.expect('manifest'))
    entries = {'static': ([], []), 'dynamic': ([], [])}
    while reader.peek()[:1] == ['impute']:
        _, block, name, value = reader.next()
        entries[block][0].append(name)
        entries[block][1].append(float.fromhex(value))
    reader.expect('end', 'manifest')
    return FeatureManifest(static_names=entries['static'][0], dynamic_names=entries['dynamic'][0],
                           static_impute=np.array(entries['static'][1], dtype=float),
                           dynamic_impute=np.array(entries['dynamic'][1], dtype=float),
                           version=opts.get('version', PIPELINE_VERSION))


def _lines(path: str) -> Iterator[str]:
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                yield line.rstrip('\n')


def load_model(path: str) -> ModelArtifact:
    """
    读取模型文件

    Raises:
        ModelError: 文件缺失、版本不符或内容损坏
    """
    if not os.path.exists(path):
        raise ModelError(f"Model file not found: {path}")
    reader = _Reader(path, list(_lines(path)))
    try:
        header = reader.expect(FORMAT_HEADER)
        if int(header[1]) != FORMAT_VERSION:
            raise ModelError(f"{path}: unsupported model format version {header[1]}")
        version = reader.expect('pipeline_version')[1]
        digest = reader.expect('config_digest')[1]
        kind = reader.next()
        if kind[0] == 'stacked':
            opts = _options(kind)
            rf_a = _read_forest(reader, 'rf_a')
            rf_b = _read_forest(reader, 'rf_b')
            meta = _read_ridge(reader, 'meta')
            model: Model = StackedModel(rf_a=rf_a, rf_b=rf_b, meta=meta, k_folds=int(opts['k_folds']),
                                        n_static=int(opts['n_static']))
        elif kind[0] == 'single':
            model = _read_forest(reader, 'model') if reader.peek()[:1] == ['forest'] \
                else _read_ridge(reader, 'model')
        else:
            raise ModelError(f"{path}: unknown model kind {kind[0]!r}")
        manifest = _read_manifest(reader) if reader.peek()[:1] == ['manifest'] else None
        reader.expect('end', 'model')
    except (IndexError, KeyError, ValueError) as e:
        raise ModelError(f"{path}:{reader.pos}: corrupt model file ({e})")
    return ModelArtifact(model=model, manifest=manifest,
                         config_digest='' if digest == '-' else digest, pipeline_version=version)
