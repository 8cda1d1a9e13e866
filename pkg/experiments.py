"""
实验驱动模块
可重启的流水线阶段，以及挂牌价对比实验与税务评估实验
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from explain import (AttributionReport, top_k_report, permutation_importance,
                     write_report_csv, write_instance_matrix, write_permutation_csv)
from feature_builder import (FeatureBuilder, FeatureRow, AssembledDataset, assemble_dataset, load_properties,
                             write_features_csv, read_features_csv)
from geo_core import load_cbg_polygons
from home_census import load_demographics, infer_all_homes, write_homes_csv, read_homes_csv
from loader import MissingInputError, TableLoader
from manifest import RunManifest
from metric_validator import MetricValidator
from ml import (ModelError, ForestParams, design_matrix, labels, evaluate, fit_forest, fit_ridge,
                fit_stacked)
from model_io import ModelArtifact, save_model, load_model
from seeds import derive_seed, rng_for
from settings import RunConfig
from synth import SyntheticCitySpec, SyntheticCity, generate_synthetic
from trajectory import PingParseReport, parse_pings, detect_all_stops, write_stops_csv, read_stops_csv

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

MIN_LISTPRICE_ROWS = 50
TAX_KINDS = ('commercial', 'residential')


def _fmt(value: Optional[float]) -> str:
    return 'undefined' if value is None else repr(float(value))


def write_key_values(lines: Dict[str, object], path: str) -> None:
    """写出 key=value 报告，按插入顺序"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for key, value in lines.items():
            f.write(f"{key}={value}\n")


class Pipeline:
    """
    流水线阶段

    每个阶段写出结果后再从磁盘读回，下游阶段只读取持久化文件；
    ensure_* 仅在运行清单中该阶段的配置摘要与输入输出文件摘要都与当前一致时复用已有结果，
    否则重新运行该阶段。
    """

    def __init__(self, config: RunConfig, n_jobs: Optional[int] = None):
        self.config = config
        self.n_jobs = n_jobs
        self.output_dir = config.resolved_output_dir()
        self.manifest = RunManifest(self.output_dir)
        self._polygons = None
        self._demographics = None

    def path(self, stage: str, name: str) -> str:
        return os.path.join(self.output_dir, stage, name)

    def input_path(self, key: str) -> str:
        path = self.config.input_path(key)
        if not os.path.exists(path):
            raise MissingInputError(f"Input file not found: {path} (run `synth` or set {key})")
        return path

    def polygons(self):
        if self._polygons is None:
            self._polygons = load_cbg_polygons(self.input_path('polygons_path'))
        return self._polygons

    def demographics(self):
        if self._demographics is None:
            self._demographics = load_demographics(self.input_path('demographics_path'))
        return self._demographics

    # ------------------------------------------------------------ 阶段

    def synth(self) -> SyntheticCity:
        city = generate_synthetic(SyntheticCitySpec.from_config(self.config), os.path.join(self.output_dir, 'synth'))
        self.manifest.record('synth', self.config, [], [city.paths[k] for k in sorted(city.paths)])
        return city

    def detect_stops(self):
        cfg = self.config
        pings_path = self.input_path('pings_path')
        report = PingParseReport()
        streams = parse_pings(pings_path, report)
        stops = detect_all_stops(streams, cfg.r_stop, cfg.min_stop_duration_s, cfg.max_gap_s,
                                 cfg.utc_offset_hours, self.n_jobs)
        out = self.path('stops', 'stops.csv')
        write_stops_csv(stops, out)
        self.manifest.record('detect-stops', cfg, [pings_path], [out])
        return read_stops_csv(out)

    def _reusable(self, stage: str) -> bool:
        if self.manifest.is_current(stage, self.config):
            return True
        logger.info(f"阶段 {stage} 无可复用的结果（缺失、配置或输入已变化），重新计算")
        return False

    def ensure_stops(self):
        if self._reusable('detect-stops'):
            return read_stops_csv(self.path('stops', 'stops.csv'))
        return self.detect_stops()

    def infer_homes(self):
        cfg = self.config
        stops = self.ensure_stops()
        homes, report = infer_all_homes(stops, self.polygons(), self.demographics(), cfg.r_home, cfg.min_nights,
                                        cfg.home_nights, cfg.utc_offset_hours, self.n_jobs)
        out = self.path('homes', 'homes.csv')
        drops = self.path('homes', 'drop_report.csv')
        write_homes_csv(homes, out)
        TableLoader().write(report.to_frame(), drops)
        self.manifest.record('infer-homes', cfg,
                             [self.path('stops', 'stops.csv'), self.input_path('polygons_path'),
                              self.input_path('demographics_path')], [out, drops])
        return read_homes_csv(out, self.demographics())

    def ensure_homes(self):
        if self._reusable('infer-homes'):
            return read_homes_csv(self.path('homes', 'homes.csv'), self.demographics())
        return self.infer_homes()

    def build_features(self) -> List[FeatureRow]:
        cfg = self.config
        homes = self.ensure_homes()
        stops = self.ensure_stops()
        properties = load_properties(self.input_path('properties_path'), self.polygons())
        builder = FeatureBuilder(self.polygons(), self.demographics(), homes, stops, cfg)
        out = self.path('features', 'features.csv')
        sidecar = self.path('features', 'features_manifest.csv')
        write_features_csv(builder.build_rows(properties, self.n_jobs), out)
        rows = read_features_csv(out)
        if rows:
            assemble_dataset(rows, cfg).manifest.write(sidecar)
        self.manifest.record('build-features', cfg,
                             [self.path('homes', 'homes.csv'), self.path('stops', 'stops.csv'),
                              self.input_path('properties_path')],
                             [out] + ([sidecar] if rows else []))
        return rows

    def ensure_features(self) -> List[FeatureRow]:
        if self._reusable('build-features'):
            return read_features_csv(self.path('features', 'features.csv'))
        return self.build_features()

    def dataset(self, artifact: Optional[ModelArtifact] = None) -> AssembledDataset:
        manifest = artifact.manifest if artifact is not None else None
        return assemble_dataset(self.ensure_features(), self.config, manifest=manifest)

    def train(self) -> ModelArtifact:
        cfg = self.config
        data = self.dataset()
        names = {'static': data.manifest.names('static'), 'dynamic': data.manifest.names('dynamic')}
        model = fit_stacked(data.train, cfg, feature_names=names, n_jobs=self.n_jobs)
        out = self.path('train', 'model.txt')
        save_model(ModelArtifact(model=model, manifest=data.manifest, config_digest=cfg.digest()), out)
        self.manifest.record('train', cfg, [self.path('features', 'features.csv')], [out])
        return load_model(out)

    def ensure_model(self) -> ModelArtifact:
        if self._reusable('train'):
            return load_model(self.path('train', 'model.txt'))
        return self.train()

    def evaluate(self) -> Dict[str, Optional[float]]:
        artifact = self.ensure_model()
        data = self.dataset(artifact)
        metrics = evaluate(artifact.model, data.test)
        out = self.path('evaluate', 'metrics.txt')
        write_key_values({'label_transform': self.config.label_transform, 'n_train': len(data.train),
                          'n_test': len(data.test), 'mse': _fmt(metrics['mse']), 'r2': _fmt(metrics['r2'])}, out)
        self.manifest.record('evaluate', self.config, [self.path('train', 'model.txt')], [out])
        logger.info(f"评估完成：mse={metrics['mse']:.6g} r2={_fmt(metrics['r2'])}")
        return metrics

    def explain(self) -> AttributionReport:
        cfg = self.config
        artifact = self.ensure_model()
        data = self.dataset(artifact)
        names = data.manifest.names('all')
        X_test = design_matrix(data.test, 'all')
        report = attribute(artifact.model.predict, data.train, data.test, 'all', names, cfg, 'explain', self.n_jobs)
        delta = permutation_importance(artifact.model.predict, X_test, labels(data.test),
                                       derive_seed(cfg.seed, 'explain'), cfg.perm_repeats)
        outputs = [self.path('explain', 'shapley_top.csv'), self.path('explain', 'shapley_instances.csv'),
                   self.path('explain', 'permutation_importance.csv')]
        write_report_csv(report, outputs[0])
        write_instance_matrix(report, outputs[1])
        write_permutation_csv(names, delta, outputs[2])
        self.manifest.record('explain', cfg, [self.path('train', 'model.txt')], outputs)
        return report


def attribute(predict, train: List[FeatureRow], test: List[FeatureRow], block: str, names: List[str],
              config: RunConfig, scope: str, n_jobs: Optional[int] = None) -> AttributionReport:
    """在测试行上计算Shapley归因，背景为按种子抽取的训练行"""
    eval_rows = test[:config.shap_eval_rows]
    n_bg = min(config.shap_background, len(train))
    picks = np.sort(rng_for(config.seed, scope, 'background').choice(len(train), size=n_bg, replace=False))
    background = design_matrix([train[i] for i in picks], block)
    return top_k_report(predict, design_matrix(eval_rows, block), background, names, config.shap_top_k,
                        config.shap_samples, derive_seed(config.seed, scope, 'shapley'),
                        instance_ids=[r.property_id for r in eval_rows], n_jobs=n_jobs)


@dataclass
class ListPriceReport:
    """挂牌价实验：静态/动态堆叠模型与静态/静态基线在同一划分上的对比"""
    n_train: int
    n_test: int
    treatment: Dict[str, Optional[float]]
    baseline: Dict[str, Optional[float]]
    ridge_all: Dict[str, Optional[float]]
    relative_mse_improvement: float
    notes: List[str] = field(default_factory=list)

    def to_lines(self) -> Dict[str, object]:
        return {
            'n_train': self.n_train,
            'n_test': self.n_test,
            'dynamic_mse': _fmt(self.treatment['mse']),
            'dynamic_r2': _fmt(self.treatment['r2']),
            'static_mse': _fmt(self.baseline['mse']),
            'static_r2': _fmt(self.baseline['r2']),
            'ridge_all_mse': _fmt(self.ridge_all['mse']),
            'ridge_all_r2': _fmt(self.ridge_all['r2']),
            'relative_mse_improvement': _fmt(self.relative_mse_improvement),
            **{f"reference_note_{i}": note for i, note in enumerate(self.notes)},
        }


def run_listprice_experiment(config: RunConfig, pipeline: Optional[Pipeline] = None) -> ListPriceReport:
    """
    挂牌价对比实验

    在同一训练/测试划分与种子下训练 stacked(静态, 动态) 与 stacked(静态, 静态)，
    另附一个全部特征上的岭回归参考基线。

    Raises:
        ModelError: 可用行数少于50
    """
    pipeline = pipeline or Pipeline(config)
    raw = pipeline.ensure_features()
    if len(raw) < MIN_LISTPRICE_ROWS:
        raise ModelError(f"List-price experiment needs >= {MIN_LISTPRICE_ROWS} rows, got {len(raw)}")
    data = assemble_dataset(raw, config)
    names = {'static': data.manifest.names('static'), 'dynamic': data.manifest.names('dynamic')}

    treatment = fit_stacked(data.train, config, baseline=False, feature_names=names, n_jobs=pipeline.n_jobs)
    baseline = fit_stacked(data.train, config, baseline=True, feature_names=names, n_jobs=pipeline.n_jobs)
    ridge = fit_ridge(design_matrix(data.train, 'all'), labels(data.train), config.ridge_lambda,
                      feature_names=data.manifest.names('all'), block='all')

    m_treatment = evaluate(treatment, data.test)
    m_baseline = evaluate(baseline, data.test)
    m_ridge = evaluate(ridge, data.test)
    improvement = 0.0
    if m_baseline['mse'] > 0:
        improvement = (m_baseline['mse'] - m_treatment['mse']) / m_baseline['mse']
    notes = MetricValidator().reference_notes('listprice', {'relative_mse_improvement': improvement})
    report = ListPriceReport(n_train=len(data.train), n_test=len(data.test), treatment=m_treatment,
                             baseline=m_baseline, ridge_all=m_ridge, relative_mse_improvement=improvement,
                             notes=notes)

    out = pipeline.path('listprice', 'report.txt')
    write_key_values(report.to_lines(), out)
    pipeline.manifest.record('run-listprice', config, [pipeline.path('features', 'features.csv')], [out])
    logger.info(f"挂牌价实验完成：动态 mse={m_treatment['mse']:.6g}，静态 mse={m_baseline['mse']:.6g}，"
                f"相对降幅 {improvement:.2%}")
    return report


@dataclass
class TaxKindResult:
    kind: str
    n_records: int
    metrics: Dict[str, Optional[float]]
    report: AttributionReport


@dataclass
class TaxReport:
    results: Dict[str, TaxKindResult]
    skipped: List[str]
    notes: List[str] = field(default_factory=list)


def run_tax_experiment(config: RunConfig, pipeline: Optional[Pipeline] = None) -> TaxReport:
    """
    税务评估实验

    剔除低于 tax_min_price 的房产，每类最多抽样 tax_sample_per_kind 条，只用动态特征、
    对数价格标签，每类训练一个 tax_n_estimators 棵树的随机森林并输出前 shap_top_k 个Shapley特征。
    记录数少于 tax_min_records 的类别跳过并告警。
    """
    pipeline = pipeline or Pipeline(config)
    raw = pipeline.ensure_features()
    eligible = [r for r in raw if r.price >= config.tax_min_price]
    logger.info(f"税务实验：{len(eligible)}/{len(raw)} 个房产价格不低于 {config.tax_min_price:g}")
    params = ForestParams.from_config(config, n_estimators=config.tax_n_estimators)
    validator = MetricValidator()

    results: Dict[str, TaxKindResult] = {}
    skipped: List[str] = []
    notes: List[str] = []
    outputs: List[str] = []
    for kind in TAX_KINDS:
        rows = [r for r in eligible if r.kind == kind]
        if len(rows) < config.tax_min_records:
            logger.warning(f"{kind} 类仅 {len(rows)} 条记录（少于 {config.tax_min_records}），跳过")
            skipped.append(kind)
            continue
        if len(rows) > config.tax_sample_per_kind:
            picks = rng_for(config.seed, 'tax_sample', kind).choice(len(rows), size=config.tax_sample_per_kind,
                                                                   replace=False)
            rows = [rows[i] for i in np.sort(picks)]
        data = assemble_dataset(rows, config, label_transform='log')
        names = data.manifest.names('dynamic')
        forest = fit_forest(design_matrix(data.train, 'dynamic'), labels(data.train), params,
                            derive_seed(config.seed, 'tax', kind), names, 'dynamic', pipeline.n_jobs)
        metrics = evaluate(forest, data.test)
        report = attribute(forest.predict, data.train, data.test, 'dynamic', names, config, f"tax_{kind}",
                           pipeline.n_jobs)
        top_path = pipeline.path('tax', f'{kind}_shapley.csv')
        matrix_path = pipeline.path('tax', f'{kind}_instances.csv')
        write_report_csv(report, top_path)
        write_instance_matrix(report, matrix_path)
        outputs += [top_path, matrix_path]
        notes += validator.reference_notes(kind, metrics)
        results[kind] = TaxKindResult(kind=kind, n_records=len(rows), metrics=metrics, report=report)
        logger.info(f"{kind} 模型：{len(rows)} 条记录，mse={metrics['mse']:.6g} r2={_fmt(metrics['r2'])}")

    summary: Dict[str, object] = {'label_transform': 'log', 'min_price': repr(float(config.tax_min_price))}
    for kind in TAX_KINDS:
        if kind in results:
            res = results[kind]
            summary[f'{kind}_n_records'] = res.n_records
            summary[f'{kind}_mse'] = _fmt(res.metrics['mse'])
            summary[f'{kind}_r2'] = _fmt(res.metrics['r2'])
            summary[f'{kind}_top_feature'] = res.report.top(1)[0][1]
        else:
            summary[f'{kind}_status'] = 'skipped'
    for i, note in enumerate(notes):
        summary[f'reference_note_{i}'] = note
    metrics_path = pipeline.path('tax', 'metrics.txt')
    write_key_values(summary, metrics_path)
    pipeline.manifest.record('run-tax', config, [pipeline.path('features', 'features.csv')],
                             outputs + [metrics_path])
    return TaxReport(results=results, skipped=skipped, notes=notes)
