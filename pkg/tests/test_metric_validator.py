#!/usr/bin/env python3
"""
指标参考值比对测试
"""

import sys
from pathlib import Path

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from metric_validator import MetricValidator, REFERENCE_METRICS


def test_within_tolerance_is_consistent():
    """测试容差内一致"""
    validator = MetricValidator()
    payload = validator.validate({'metrics': {'mse': 1.80, 'r2': 0.44}}, REFERENCE_METRICS['commercial'])
    assert payload['consistent'] is True
    assert len(payload['notes']) == 2
    assert all('一致' in note for note in payload['notes'])
    print("✓ 容差内一致测试通过")


def test_deviation_is_reported():
    """测试偏差说明"""
    validator = MetricValidator()
    payload = validator.validate({'metrics': {'mse': 0.60, 'r2': 0.48}}, REFERENCE_METRICS['residential'])
    assert payload['consistent'] is False
    mse_note = [n for n in payload['notes'] if n.startswith('mse')][0]
    assert '偏离参考值' in mse_note
    assert '100.0%' in mse_note


def test_undefined_metric_cannot_be_compared():
    """测试 r2 未定义（None）时无法比对"""
    validator = MetricValidator()
    payload = validator.validate({'metrics': {'r2': None}}, REFERENCE_METRICS['commercial'])
    assert payload['consistent'] is False
    assert '无法比对' in payload['notes'][0]


def test_no_reference_and_unsupported_metrics():
    """测试无参考值与不支持的指标"""
    validator = MetricValidator()
    payload = validator.validate({'metrics': {'mse': 1.0}, 'notes': ['已有说明']}, None)
    assert payload['notes'] == ['已有说明', '无参考值，跳过比对']
    assert payload['consistent'] is False

    payload = validator.validate({'metrics': {'accuracy': 0.9}}, REFERENCE_METRICS['commercial'])
    assert payload['notes'] == []
    assert payload['consistent'] is True


def test_reference_notes_are_scoped():
    """测试按实验范围生成参考说明"""
    notes = MetricValidator().reference_notes('listprice', {'relative_mse_improvement': 0.03})
    assert notes == ['[listprice] relative_mse_improvement: 0.03 与参考值 0.03 一致']

    notes = MetricValidator().reference_notes('unknown_scope', {'mse': 1.0})
    assert notes == ['[unknown_scope] 无参考值，跳过比对']
