import logging
from dataclasses import asdict, fields

from decouple import RepositoryEnv
from django import forms
from django.core.exceptions import ValidationError

from .mppi import MppiConfig
from .networks import ModelConfig
from .training import ABLATION_CHOICES, TrainConfig
from .vehicle import SCENARIOS, DatasetConfig, PathConfig, VehicleParams

logger = logging.getLogger(__name__)

# Overrides applied by --full-scale.
FULL_SCALE = {
    'segments': 8000,
    'M': 1500,
}
FULL_SCALE_EPISODES = 200


class CommaTupleField(forms.CharField):
    """Comma-separated values converted to a tuple of `item_type`."""

    def __init__(self, item_type=str, **kwargs):
        self.item_type = item_type
        super().__init__(**kwargs)

    def to_python(self, value):
        value = super().to_python(value)
        items = [item.strip() for item in value.split(',') if item.strip()]
        try:
            return tuple(self.item_type(item) for item in items)
        except ValueError:
            raise ValidationError("Некорректный список значений: %(value)s", code='invalid', params={'value': value})


def _as_form_value(value):
    if isinstance(value, tuple):
        return ','.join(str(item) for item in value)
    return value


class ConfigForm(forms.Form):
    """Key=value config validated field by field; missing keys take the dataclass defaults."""

    config_class = None

    def __init__(self, data=None, **kwargs):
        merged = {name: _as_form_value(value) for name, value in self.default_values().items()}
        merged.update({key: value for key, value in (data or {}).items() if key in self.base_fields})
        super().__init__(merged, **kwargs)

    @classmethod
    def default_values(cls):
        return asdict(cls.config_class())

    def build_kwargs(self):
        names = {f.name for f in fields(self.config_class)}
        return {name: value for name, value in self.cleaned_data.items() if name in names}

    def to_config(self):
        if not self.is_valid():
            raise ValidationError(self.errors.as_text(), code='invalid_config')
        return self.config_class(**self.build_kwargs())


class DatasetConfigForm(ConfigForm):
    config_class = DatasetConfig

    segments = forms.IntegerField(min_value=1, label='Число сегментов')
    length = forms.IntegerField(min_value=1, label='Длина сегмента')
    dt = forms.FloatField(min_value=1e-6, label='Шаг, с')
    scenarios = CommaTupleField(label='Сценарии')
    cutoff_hz = forms.FloatField(min_value=1e-6, label='Частота среза, Гц')
    speed_min = forms.FloatField(min_value=0.0, label='Минимальная скорость')
    speed_max = forms.FloatField(min_value=0.0, label='Максимальная скорость')
    position_spread = forms.FloatField(min_value=0.0)
    heading_spread = forms.FloatField(min_value=0.0)

    @classmethod
    def default_values(cls):
        values = asdict(DatasetConfig())
        values['speed_min'], values['speed_max'] = values.pop('speed_range')
        return values

    def clean_scenarios(self):
        scenarios = self.cleaned_data['scenarios']
        unknown = [s for s in scenarios if s not in SCENARIOS and s != 'random']
        if not scenarios or unknown:
            raise ValidationError("Допустимые сценарии: S1, S2, S3, random")
        return scenarios

    def clean(self):
        cleaned_data = super().clean()
        low, high = cleaned_data.get('speed_min'), cleaned_data.get('speed_max')
        if low is not None and high is not None and low > high:
            raise ValidationError({'speed_max': "Максимальная скорость меньше минимальной."})
        return cleaned_data

    def build_kwargs(self):
        kwargs = super().build_kwargs()
        kwargs['speed_range'] = (self.cleaned_data['speed_min'], self.cleaned_data['speed_max'])
        return kwargs


class ModelConfigForm(ConfigForm):
    config_class = ModelConfig

    latent_dim = forms.IntegerField(min_value=1, label='r')
    embed_dim = forms.IntegerField(min_value=1, label='d_e')
    psi_hidden = CommaTupleField(item_type=int)
    encoder_hidden = CommaTupleField(item_type=int)
    residual_hidden = CommaTupleField(item_type=int)
    beta = forms.FloatField(min_value=0.0, max_value=1.0, label='β')
    eps0 = forms.FloatField(min_value=0.0, max_value=1.0, label='ε₀')

    def clean(self):
        cleaned_data = super().clean()
        beta, eps0 = cleaned_data.get('beta'), cleaned_data.get('eps0')
        if beta is not None and eps0 is not None and (beta <= 0 or eps0 <= 0 or beta + eps0 >= 1):
            raise ValidationError("Требуется beta > 0, eps0 > 0 и beta + eps0 < 1.")
        return cleaned_data


class TrainConfigForm(ConfigForm):
    config_class = TrainConfig

    lambda_c = forms.FloatField(min_value=0.0)
    lambda_r = forms.FloatField(min_value=0.0)
    mu_reg = forms.FloatField(min_value=0.0)
    learning_rate = forms.FloatField(min_value=0.0)
    momentum = forms.FloatField(min_value=0.0, max_value=1.0)
    epochs = forms.IntegerField(min_value=1)
    batch_size = forms.IntegerField(min_value=1)
    contraction_sample_count = forms.IntegerField(min_value=1)
    ablation = forms.ChoiceField(choices=ABLATION_CHOICES)
    seed = forms.IntegerField()
    checkpoint_every = forms.IntegerField(min_value=0)

    def __init__(self, data=None, **kwargs):
        data = dict(data or {})
        # Command-line spelling: no-fiber, no-contr.
        if data.get('ablation'):
            data['ablation'] = data['ablation'].replace('-', '_')
        super().__init__(data, **kwargs)


class MppiConfigForm(ConfigForm):
    config_class = MppiConfig

    M = forms.IntegerField(min_value=1, label='Число траекторий')
    T = forms.IntegerField(min_value=1, label='Горизонт')
    sigma_delta = forms.FloatField(min_value=1e-12)
    sigma_a = forms.FloatField(min_value=1e-12)
    lambda_temp = forms.FloatField(min_value=1e-12)
    lambda_latent = forms.FloatField(min_value=0.0)
    w_lat = forms.FloatField(min_value=0.0)
    w_head = forms.FloatField(min_value=0.0)
    w_u = forms.FloatField(min_value=0.0)
    terminal_lat = forms.FloatField(min_value=0.0)
    terminal_head = forms.FloatField(min_value=0.0)
    dt = forms.FloatField(min_value=1e-6)
    iterations = forms.IntegerField(min_value=1)

    @classmethod
    def default_values(cls):
        values = asdict(MppiConfig())
        values['sigma_delta'], values['sigma_a'] = values.pop('sigma_u')
        return values

    def build_kwargs(self):
        kwargs = super().build_kwargs()
        kwargs['sigma_u'] = (self.cleaned_data['sigma_delta'], self.cleaned_data['sigma_a'])
        return kwargs


class PathConfigForm(ConfigForm):
    config_class = PathConfig

    kind = forms.ChoiceField(choices=[('sine', 'Синусоида'), ('straight', 'Прямая')], label='Тип пути')
    speed = forms.FloatField(min_value=1e-6, label='Скорость, м/с')
    amplitude = forms.FloatField(min_value=0.0, label='Амплитуда, м')
    period = forms.FloatField(min_value=1e-6, label='Период, с')


class VehicleConfigForm(ConfigForm):
    config_class = VehicleParams

    wheelbase = forms.FloatField(min_value=1e-6)
    mu_ref = forms.FloatField(min_value=1e-6)
    wind_coupling = forms.FloatField(min_value=0.0)
    delta_max = forms.FloatField(min_value=1e-6)
    a_max = forms.FloatField(min_value=1e-6)
    v_max = forms.FloatField(min_value=1e-6)
    gravity = forms.FloatField(min_value=1e-6)


def read_config_file(path):
    """Raw key=value pairs of a config file (decouple's .env syntax)."""
    if path is None:
        return {}
    return dict(RepositoryEnv(str(path)).data)


def load_config(path, *form_classes, overrides=None):
    """Validates a key=value file against the given forms.

    Returns one config dataclass per form, in order. Keys no form knows are
    logged as warnings; invalid values raise ValidationError with the field
    errors.
    """
    data = read_config_file(path)
    data.update(overrides or {})
    known = set()
    configs = []
    for form_class in form_classes:
        known.update(form_class.base_fields)
        configs.append(form_class(data).to_config())
    for key in sorted(set(data) - known):
        logger.warning("Unknown config key ignored: %s", key)
    return configs
