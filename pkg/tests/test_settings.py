#!/usr/bin/env python3
"""
运行配置测试
"""

import os
import sys
import tempfile
from pathlib import Path

import pytest

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from settings import RunConfig, ConfigError, Settings


def _write_conf(directory, text):
    path = os.path.join(directory, 'run.conf')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def test_defaults():
    """测试默认值"""
    config = RunConfig()
    assert config.r_stop == 50.0
    assert config.min_stop_duration_s == 300.0
    assert config.r_home == 100.0
    assert config.min_nights == 3
    assert config.home_nights == (1, 2, 3, 4)
    assert config.radius_m == 500.0
    assert config.resident_rule == 'radius'
    assert config.commuting_mode == 'behavioral'
    assert config.k_folds == 5
    assert config.test_fraction == 0.1
    print("✓ 默认配置测试通过")


def test_from_file_parses_types_and_comments():
    """测试配置文件解析：注释、整数、浮点、元组"""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = _write_conf(temp_dir, (
            "# 小规模配置\n"
            "r_stop = 75\n"
            "min_nights = 2\n"
            "home_nights = 0,6\n"
            "resident_rule = cbg\n"
            "output_dir = /tmp/somewhere\n"
        ))
        config = RunConfig.from_file(path)

    assert config.r_stop == 75.0
    assert isinstance(config.r_stop, float)
    assert config.min_nights == 2
    assert config.home_nights == (0, 6)
    assert config.resident_rule == 'cbg'
    assert config.output_dir == '/tmp/somewhere'
    print("✓ 配置文件解析测试通过")


def test_seed_override():
    """测试命令行 --seed 覆盖，None 不覆盖"""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = _write_conf(temp_dir, "seed = 7\n")
        assert RunConfig.from_file(path, {'seed': None}).seed == 7
        assert RunConfig.from_file(path, {'seed': 11}).seed == 11


def test_unknown_key_rejected():
    """测试未知配置项"""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = _write_conf(temp_dir, "r_stopp = 50\n")
        with pytest.raises(ConfigError):
            RunConfig.from_file(path)


def test_missing_file_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_file('/nonexistent/run.conf')


@pytest.mark.parametrize('text', [
    "min_nights = three\n",
    "resident_rule = everyone\n",
    "commuting_mode = teleport\n",
    "test_fraction = 1.5\n",
    "home_nights = 1,9\n",
    "k_folds = 1\n",
    "n_estimators = 0\n",
])
def test_invalid_values_rejected(text):
    """测试非法取值"""
    with tempfile.TemporaryDirectory() as temp_dir:
        path = _write_conf(temp_dir, text)
        with pytest.raises(ConfigError):
            RunConfig.from_file(path)


def test_digest_ignores_output_dir_but_tracks_parameters():
    """测试配置摘要：输出目录不参与，计算参数参与"""
    base = RunConfig()
    assert base.digest() == RunConfig(output_dir='/elsewhere').digest()
    assert base.digest() != RunConfig(r_stop=60.0).digest()
    assert base.digest() != RunConfig(seed=43).digest()
    assert len(base.digest()) == 64


def test_to_lines_sorted_and_complete():
    """测试规范化序列化"""
    lines = RunConfig().to_lines()
    names = [line.split(' = ')[0] for line in lines]
    assert names == sorted(RunConfig.keys())
    assert "home_nights = 1,2,3,4" in lines
    assert "r_stop = 50.0" in lines


def test_input_path_defaults_to_synth_dir():
    """测试未配置输入路径时指向合成数据目录"""
    config = RunConfig(output_dir='/data/run1', pings_path='/raw/pings.csv')
    assert config.input_path('pings_path') == '/raw/pings.csv'
    assert config.input_path('polygons_path') == os.path.join('/data/run1', 'synth', 'cbg.geojson')


def test_environment_settings(monkeypatch):
    """测试环境变量设置"""
    monkeypatch.setenv('LOG_LEVEL', 'DEBUG')
    monkeypatch.setenv('N_JOBS', '2')
    s = Settings()
    assert s.LOG_LEVEL == 'DEBUG'
    assert s.N_JOBS == 2
    print("✓ 环境变量设置测试通过")
