#!/usr/bin/env python3
"""
流水线阶段与实验测试（小规模合成城市）
"""

import os
import sys
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from experiments import Pipeline, run_listprice_experiment, run_tax_experiment, write_key_values
from feature_builder import dynamic_feature_names, static_feature_names
from loader import MissingInputError
from manifest import file_digest
from ml import ModelError
from settings import RunConfig


def _config(output_dir, **overrides):
    values = dict(output_dir=output_dir, seed=11, synth_users=40, synth_properties=120, synth_days=7,
                  synth_grid=3, synth_hotspots=6, synth_noise_std=5000.0, n_estimators=5, k_folds=2,
                  min_samples_leaf=3, tax_n_estimators=5, tax_min_price=1.0, tax_min_records=10,
                  shap_samples=5, shap_background=10, shap_eval_rows=4, shap_top_k=5, perm_repeats=1)
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture(scope='module')
def pipeline():
    """运行一遍完整流水线，供本模块各测试共用"""
    with tempfile.TemporaryDirectory() as temp_dir:
        pipe = Pipeline(_config(temp_dir), n_jobs=1)
        pipe.synth()
        pipe.detect_stops()
        pipe.infer_homes()
        pipe.build_features()
        pipe.train()
        yield pipe


def test_stage_outputs_and_manifest(pipeline):
    """测试各阶段输出文件与运行清单"""
    for stage, name in (('stops', 'stops.csv'), ('homes', 'homes.csv'), ('homes', 'drop_report.csv'),
                        ('features', 'features.csv'), ('features', 'features_manifest.csv'),
                        ('train', 'model.txt')):
        assert os.path.exists(pipeline.path(stage, name))

    records = pipeline.manifest.read()
    assert list(records) == ['synth', 'detect-stops', 'infer-homes', 'build-features', 'train']
    for record in records.values():
        assert record.entries['config_digest'] == pipeline.config.digest()
    assert records['train'].entries['output.train/model.txt'] == file_digest(pipeline.path('train', 'model.txt'))

    drops = pd.read_csv(pipeline.path('homes', 'drop_report.csv'))
    assert drops.loc[drops['reason'] == 'users_total', 'count'].iat[0] == 40
    print("✓ 流水线阶段输出测试通过")


def test_features_rows(pipeline):
    rows = pipeline.ensure_features()
    assert len(rows) == 120
    assert [r.property_id for r in rows] == sorted(r.property_id for r in rows)
    assert all(len(r.static_features) == len(static_feature_names()) for r in rows)
    assert all(len(r.dynamic_features) == len(dynamic_feature_names()) for r in rows)
    assert {r.kind for r in rows} <= {'residential', 'commercial'}

    data = pipeline.dataset()
    assert len(data.test) == 12
    assert len(data.train) == 108
    for r in data.rows:
        assert not np.isnan(r.static_features).any()
        assert not np.isnan(r.dynamic_features).any()


def test_rerun_is_byte_identical(pipeline):
    """测试重跑特征与训练阶段，输出逐字节一致"""
    features = pipeline.path('features', 'features.csv')
    model = pipeline.path('train', 'model.txt')
    before = (file_digest(features), file_digest(model))
    pipeline.build_features()
    pipeline.train()
    assert (file_digest(features), file_digest(model)) == before


def test_evaluate_and_explain(pipeline):
    metrics = pipeline.evaluate()
    assert metrics['mse'] >= 0
    with open(pipeline.path('evaluate', 'metrics.txt'), encoding='utf-8') as f:
        lines = f.read().splitlines()
    assert lines[:3] == ['label_transform=identity', 'n_train=108', 'n_test=12']

    report = pipeline.explain()
    assert report.values.shape == (4, len(static_feature_names()) + len(dynamic_feature_names()))
    assert len(report.top()) == 5
    top = pd.read_csv(pipeline.path('explain', 'shapley_top.csv'))
    assert list(top['rank']) == [1, 2, 3, 4, 5]
    perm = pd.read_csv(pipeline.path('explain', 'permutation_importance.csv'))
    assert len(perm) == report.values.shape[1]
    assert 'explain' in pipeline.manifest.read()


def test_listprice_experiment(pipeline):
    """测试挂牌价实验报告"""
    report = run_listprice_experiment(pipeline.config, pipeline)
    assert (report.n_train, report.n_test) == (108, 12)
    expected = (report.baseline['mse'] - report.treatment['mse']) / report.baseline['mse']
    assert report.relative_mse_improvement == pytest.approx(expected)
    assert len(report.notes) == 1

    with open(pipeline.path('listprice', 'report.txt'), encoding='utf-8') as f:
        keys = [line.split('=', 1)[0] for line in f.read().splitlines()]
    assert keys[:9] == ['n_train', 'n_test', 'dynamic_mse', 'dynamic_r2', 'static_mse', 'static_r2',
                        'ridge_all_mse', 'ridge_all_r2', 'relative_mse_improvement']

    rows = pipeline.ensure_features()
    with patch.object(pipeline, 'ensure_features', return_value=rows[:49]):
        with pytest.raises(ModelError):
            run_listprice_experiment(pipeline.config, pipeline)


def test_tax_experiment(pipeline):
    """测试税务实验分类别训练与跳过"""
    report = run_tax_experiment(pipeline.config, pipeline)
    assert set(report.results) == {'commercial', 'residential'}
    assert report.skipped == []
    for kind, result in report.results.items():
        assert result.kind == kind
        assert len(result.report.feature_names) == len(dynamic_feature_names())
        assert os.path.exists(pipeline.path('tax', f'{kind}_shapley.csv'))

    strict = Pipeline(pipeline.config.with_overrides(tax_min_records=1000), n_jobs=1)
    skipped = run_tax_experiment(strict.config, strict)
    assert skipped.results == {}
    assert skipped.skipped == ['commercial', 'residential']
    with open(strict.path('tax', 'metrics.txt'), encoding='utf-8') as f:
        text = f.read()
    assert 'commercial_status=skipped' in text
    assert 'label_transform=log' in text


def test_missing_inputs_raise():
    with tempfile.TemporaryDirectory() as temp_dir:
        with pytest.raises(MissingInputError):
            Pipeline(_config(temp_dir), n_jobs=1).detect_stops()


def test_write_key_values():
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, 'sub', 'r.txt')
        write_key_values({'b': 1, 'a': 'x'}, path)
        with open(path, 'rb') as f:
            assert f.read() == b'b=1\na=x\n'


def test_ensure_reuses_only_current_results(pipeline):
    """测试配置未变时复用阶段结果，修改 radius_m 后重新构建特征"""
    features = pipeline.path('features', 'features.csv')
    # 之前的测试可能以其他配置写过同一目录，先按当前配置刷新
    pipeline.ensure_features()
    with patch.object(pipeline, 'build_features', side_effect=AssertionError('不应重新构建')):
        rows = pipeline.ensure_features()
    assert len(rows) == 120

    before = file_digest(features)
    wider = Pipeline(pipeline.config.with_overrides(radius_m=900.0), n_jobs=1)
    rebuilt = wider.ensure_features()
    records = wider.manifest.read()
    assert records['build-features'].entries['config_digest'] == wider.config.digest()
    assert file_digest(features) != before
    assert len(rebuilt) == 120

    # 输出文件被改动后不再复用
    with open(features, 'a', encoding='utf-8') as f:
        f.write('\n')
    assert not wider.manifest.is_current('build-features', wider.config)
    wider.ensure_features()
    assert wider.manifest.is_current('build-features', wider.config)

    # 恢复原配置的结果，与最初逐字节一致
    pipeline.ensure_features()
    assert file_digest(features) == before


ACCEPTANCE_SEEDS = range(1, 11)


@pytest.fixture(scope='module')
def acceptance_pipelines():
    """10个种子的默认规模合成城市（树数与折数缩减），挂牌价与税务实验共用"""
    with tempfile.TemporaryDirectory() as temp_dir:
        pipes = []
        for seed in ACCEPTANCE_SEEDS:
            config = RunConfig(output_dir=os.path.join(temp_dir, f'seed{seed}'), seed=seed,
                               synth_properties=1000, synth_days=7, n_estimators=50, k_folds=3,
                               tax_n_estimators=50, shap_samples=50, shap_background=64,
                               shap_eval_rows=40, shap_top_k=5, perm_repeats=1)
            pipe = Pipeline(config)
            pipe.synth()
            pipe.ensure_features()
            pipes.append(pipe)
        yield pipes


@pytest.mark.slow
def test_dynamic_features_beat_static_baseline(acceptance_pipelines):
    """测试植入客流信号时，静态+动态堆叠模型的测试MSE至少比静态基线低3%（10个种子中至少9个）"""
    improvements = [run_listprice_experiment(pipe.config, pipe).relative_mse_improvement
                    for pipe in acceptance_pipelines]
    assert sum(value >= 0.03 for value in improvements) >= 9, improvements
    print("✓ 动态特征增益测试通过")


@pytest.mark.slow
def test_tax_rankings_follow_planted_dependence(acceptance_pipelines):
    """测试商业类前5特征含 people_in_area_*、住宅类前5特征含 avg_income_*（10个种子中至少8个）"""
    hits = 0
    for pipe in acceptance_pipelines:
        report = run_tax_experiment(pipe.config, pipe)
        commercial = [name for _, name, _ in report.results['commercial'].report.top(5)]
        residential = [name for _, name, _ in report.results['residential'].report.top(5)]
        if (any(name.startswith('people_in_area_') for name in commercial)
                and any(name.startswith('avg_income_') for name in residential)):
            hits += 1
    assert hits >= 8
    print("✓ 税务特征排名测试通过")
