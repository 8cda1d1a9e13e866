#!/usr/bin/env python3
"""
指标参考值比对模块
把实验指标与已发表的参考值比较并记录偏差说明，仅作参考，不影响运行结果
"""

from typing import Dict, Optional

# 已发表的参考指标（税务评估实验为对数价格空间）
REFERENCE_METRICS = {
    'commercial': {'mse': 1.77, 'r2': 0.45},
    'residential': {'mse': 0.30, 'r2': 0.48},
    'listprice': {'relative_mse_improvement': 0.03},
}


class MetricValidator:
    # 支持比对的指标
    SUPPORTED_METRICS = [
        'mse',                          # 均方误差
        'r2',                           # 决定系数
        'relative_mse_improvement',     # 动态模型相对静态模型的MSE降幅
    ]

    # 相对偏差不超过该百分比视为一致
    TOLERANCE_PCT = 5.0

    def validate(self, payload: dict, reference_data: Optional[Dict[str, float]]) -> dict:
        """比对指标

        Args:
            payload: {'metrics': {名称: 值}, 'notes': [...]}
            reference_data: 参考值字典

        Returns:
            更新后的payload，notes 追加偏差说明，consistent 表示全部指标在容差内
        """
        notes = list(payload.get('notes') or [])
        consistent = True
        metrics = payload.get('metrics') or {}

        if not reference_data:
            notes.append("无参考值，跳过比对")
            payload['notes'] = notes
            payload['consistent'] = False
            return payload

        for name in sorted(metrics):
            # 只处理支持的指标
            if name not in self.SUPPORTED_METRICS:
                continue

            ref_value = reference_data.get(name)
            if ref_value is None:
                notes.append(f"{name}: 无参考值")
                continue

            try:
                metric_value = float(metrics[name])
                ref_value = float(ref_value)
            except (ValueError, TypeError):
                notes.append(f"{name}: 无法比对（值为 {metrics[name]!r}）")
                consistent = False
                continue

            if ref_value != 0:
                diff_percentage = abs(metric_value - ref_value) / abs(ref_value) * 100
            else:
                # 参考值为0时只有值也为0才算一致
                diff_percentage = 0.0 if metric_value == 0 else float('inf')

            if diff_percentage <= self.TOLERANCE_PCT:
                notes.append(f"{name}: {metric_value:.4g} 与参考值 {ref_value:.4g} 一致")
            else:
                notes.append(f"{name}: {metric_value:.4g} 偏离参考值 {ref_value:.4g} {diff_percentage:.1f}%")
                consistent = False

        payload['notes'] = notes
        payload['consistent'] = consistent
        return payload

    def reference_notes(self, scope: str, metrics: Dict[str, Optional[float]]) -> list:
        """按实验范围（commercial / residential / listprice）生成参考说明"""
        payload = self.validate({'metrics': metrics}, REFERENCE_METRICS.get(scope))
        return [f"[{scope}] {note}" for note in payload['notes']]
