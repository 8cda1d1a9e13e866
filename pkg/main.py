#!/usr/bin/env python3

import sys
from pathlib import Path
from typing import List, Optional

import click

# 添加项目根目录到Python路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from experiments import Pipeline, run_listprice_experiment, run_tax_experiment
from loader import DataError
from logger import logger
from settings import RunConfig, ConfigError, settings

# 退出码
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


def run_options(func):
    """每个子命令共用的 --config / --seed 选项"""
    func = click.option('--seed', type=int, default=None, help='覆盖配置中的根种子')(func)
    func = click.option('--config', 'config_path', required=True, type=click.Path(),
                        help='key = value 运行配置文件')(func)
    return func


def load_config(config_path: str, seed: Optional[int]) -> RunConfig:
    config = RunConfig.from_file(config_path, {'seed': seed})
    logger.info(f"加载运行配置 {config_path}，摘要 {config.digest()[:12]}")
    return config


def make_pipeline(config_path: str, seed: Optional[int]) -> Pipeline:
    return Pipeline(load_config(config_path, seed), n_jobs=settings.N_JOBS)


@click.group()
def cli():
    """移动定位数据增强的房产估值流水线"""
    pass


@cli.command('synth')
@run_options
def synth(config_path: str, seed: Optional[int]):
    """生成合成城市"""
    city = make_pipeline(config_path, seed).synth()
    for name in sorted(city.paths):
        click.echo(city.paths[name])


@cli.command('detect-stops')
@run_options
def detect_stops(config_path: str, seed: Optional[int]):
    """把定位记录压缩为停留点"""
    pipeline = make_pipeline(config_path, seed)
    stops = pipeline.detect_stops()
    click.echo(f"{sum(len(s) for s in stops.values())} stops -> {pipeline.path('stops', 'stops.csv')}")


@cli.command('infer-homes')
@run_options
def infer_homes(config_path: str, seed: Optional[int]):
    """推断用户居住地并附加人口统计"""
    pipeline = make_pipeline(config_path, seed)
    homes = pipeline.infer_homes()
    click.echo(f"{len(homes)} homes -> {pipeline.path('homes', 'homes.csv')}")


@cli.command('build-features')
@run_options
def build_features(config_path: str, seed: Optional[int]):
    """构建房产静态与动态特征"""
    pipeline = make_pipeline(config_path, seed)
    rows = pipeline.build_features()
    click.echo(f"{len(rows)} rows -> {pipeline.path('features', 'features.csv')}")


@cli.command('train')
@run_options
def train(config_path: str, seed: Optional[int]):
    """训练堆叠模型"""
    pipeline = make_pipeline(config_path, seed)
    pipeline.train()
    click.echo(pipeline.path('train', 'model.txt'))


@cli.command('evaluate')
@run_options
def evaluate(config_path: str, seed: Optional[int]):
    """在测试集上评估模型"""
    pipeline = make_pipeline(config_path, seed)
    metrics = pipeline.evaluate()
    r2 = 'undefined' if metrics['r2'] is None else f"{metrics['r2']:.6g}"
    click.echo(f"mse={metrics['mse']:.6g} r2={r2}")


@cli.command('explain')
@run_options
def explain(config_path: str, seed: Optional[int]):
    """计算Shapley归因与置换重要性"""
    pipeline = make_pipeline(config_path, seed)
    report = pipeline.explain()
    for rank, name, value in report.top():
        click.echo(f"{rank}\t{name}\t{value:.6g}")


@cli.command('run-listprice')
@run_options
def run_listprice(config_path: str, seed: Optional[int]):
    """挂牌价实验：动态特征与纯静态特征对比"""
    pipeline = make_pipeline(config_path, seed)
    report = run_listprice_experiment(pipeline.config, pipeline)
    click.echo(f"relative_mse_improvement={report.relative_mse_improvement:.6g} -> "
               f"{pipeline.path('listprice', 'report.txt')}")


@cli.command('run-tax')
@run_options
def run_tax(config_path: str, seed: Optional[int]):
    """税务评估实验：分类别动态特征模型与Shapley排名"""
    pipeline = make_pipeline(config_path, seed)
    report = run_tax_experiment(pipeline.config, pipeline)
    for kind, result in sorted(report.results.items()):
        click.echo(f"{kind}: mse={result.metrics['mse']:.6g} top={result.report.top(1)[0][1]}")
    for kind in report.skipped:
        click.echo(f"{kind}: skipped")


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    命令行入口

    Returns:
        0 成功；1 用法、配置错误或未预期的异常；2 数据错误
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        with click.Context(cli, info_name='valuation') as ctx:
            click.echo(cli.get_help(ctx), err=True)
        return EXIT_USAGE
    try:
        cli.main(args=argv, prog_name='valuation', standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted", err=True)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_USAGE
    except DataError as e:
        logger.error(f"数据错误: {e}")
        click.echo(f"Error: {e}", err=True)
        return EXIT_DATA
    except Exception as e:
        logger.exception("流水线运行异常")
        click.echo(f"Error: internal error: {e}", err=True)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(run_cli())
