import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from ..forms import (
    DatasetConfigForm, ModelConfigForm, MppiConfigForm, PathConfigForm, TrainConfigForm, load_config,
    read_config_file,
)
from ..mppi import MppiConfig
from ..networks import ModelConfig
from ..training import ABLATION_NO_FIBER
from ..vehicle import DatasetConfig


class ConfigFormTest(SimpleTestCase):
    def test_defaults_when_no_data(self):
        """Без данных форма даёт значения по умолчанию"""
        self.assertEqual(DatasetConfigForm().to_config(), DatasetConfig())
        self.assertEqual(ModelConfigForm({}).to_config(), ModelConfig())
        self.assertEqual(MppiConfigForm({}).to_config(), MppiConfig())

    def test_overrides_are_parsed(self):
        """Строковые значения приводятся к типам конфигурации"""
        cfg = DatasetConfigForm({'segments': '12', 'scenarios': 'S1, S3', 'speed_min': '3', 'speed_max': '4'}).to_config()
        self.assertEqual(cfg.segments, 12)
        self.assertEqual(cfg.scenarios, ('S1', 'S3'))
        self.assertEqual(cfg.speed_range, (3.0, 4.0))

    def test_hidden_sizes(self):
        """Размеры скрытых слоёв задаются через запятую"""
        cfg = ModelConfigForm({'encoder_hidden': '32,32', 'latent_dim': '8'}).to_config()
        self.assertEqual(cfg.encoder_hidden, (32, 32))
        self.assertEqual(cfg.latent_dim, 8)

    def test_unknown_scenario_rejected(self):
        """Неизвестный сценарий отклоняется"""
        form = DatasetConfigForm({'scenarios': 'S1,S7'})
        self.assertFalse(form.is_valid())
        self.assertIn('scenarios', form.errors)
        with self.assertRaises(ValidationError) as ctx:
            form.to_config()
        self.assertEqual(ctx.exception.code, 'invalid_config')

    def test_speed_range_order(self):
        """Минимальная скорость больше максимальной отклоняется"""
        form = DatasetConfigForm({'speed_min': '9', 'speed_max': '3'})
        self.assertFalse(form.is_valid())
        self.assertIn('speed_max', form.errors)

    def test_margins_rejected(self):
        """β + ε₀ ≥ 1 отклоняется формой"""
        self.assertFalse(ModelConfigForm({'beta': '0.9', 'eps0': '0.2'}).is_valid())

    def test_non_numeric_rejected(self):
        """Нечисловое значение поля отклоняется"""
        form = TrainConfigForm({'epochs': 'many'})
        self.assertFalse(form.is_valid())
        self.assertIn('epochs', form.errors)

    def test_ablation_hyphen_spelling(self):
        """Абляция принимается в написании командной строки (no-fiber)"""
        self.assertEqual(TrainConfigForm({'ablation': 'no-fiber'}).to_config().ablation, ABLATION_NO_FIBER)

    def test_mppi_noise_channels(self):
        """sigma_delta и sigma_a собираются в sigma_u"""
        self.assertEqual(MppiConfigForm({'sigma_delta': '0.1'}).to_config().sigma_u, (0.1, 0.3))

    def test_path_kind_choices(self):
        """Тип пути ограничен sine и straight"""
        self.assertEqual(PathConfigForm({'kind': 'straight'}).to_config().kind, 'straight')
        self.assertFalse(PathConfigForm({'kind': 'circle'}).is_valid())


class LoadConfigTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / 'run.env'
        self.path.write_text('# small run\nsegments=5\nM=64\nbogus=1\n')

    def tearDown(self):
        self.tmp.cleanup()

    def test_file_values_reach_configs(self):
        """Значения из файла попадают в соответствующие конфигурации"""
        dataset, mppi = load_config(self.path, DatasetConfigForm, MppiConfigForm)
        self.assertEqual(dataset.segments, 5)
        self.assertEqual(mppi.M, 64)

    def test_overrides_win_over_file(self):
        """Явные значения перекрывают файл"""
        (dataset,) = load_config(self.path, DatasetConfigForm, overrides={'segments': 7})
        self.assertEqual(dataset.segments, 7)

    def test_unknown_keys_logged(self):
        """Неизвестные ключи записываются в журнал как предупреждения"""
        with self.assertLogs('sfkd.forms', level='WARNING') as logs:
            load_config(self.path, DatasetConfigForm, MppiConfigForm)
        self.assertEqual(len(logs.records), 1)
        self.assertIn('bogus', logs.output[0])

    def test_no_file(self):
        """Без файла используются значения по умолчанию"""
        self.assertEqual(read_config_file(None), {})
        self.assertEqual(load_config(None, DatasetConfigForm), [DatasetConfig()])
