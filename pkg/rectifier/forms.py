from django import forms
from django.core.exceptions import ValidationError


def parse_float_list(value) -> list[float]:
    """
    Разбирает список чисел: JSON-массив или строку «0.4,0.5,0.6».
    """
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = [item for item in str(value).split(',') if item.strip()]
    try:
        return [float(item) for item in items]
    except (TypeError, ValueError):
        raise ValidationError(f'List "{value}" must contain numbers separated by commas')


class RunConfigForm(forms.Form):
    strength = forms.FloatField(label='Сила управления', min_value=0.0, max_value=1.0, required=False)
    adaptive = forms.BooleanField(label='Адаптивная сила', required=False)
    adaptive_factor = forms.FloatField(label='Множитель порога', required=True)
    adaptive_candidates = forms.CharField(label='Кандидаты силы', required=True)
    reference_strength = forms.FloatField(label='Эталонная сила', min_value=0.0, max_value=1.0, required=True)
    steps = forms.IntegerField(label='Шаги DDIM', min_value=1, required=True)
    seed = forms.IntegerField(label='Сид', min_value=0, max_value=2 ** 64 - 1, required=True)
    guidance = forms.FloatField(label='Сила guidance', min_value=0.0, required=True)
    mask_dilation = forms.IntegerField(label='Расширение маски', min_value=0, required=True)
    prompt = forms.CharField(label='Промпт', required=False, strip=False)
    negative_prompt = forms.CharField(label='Негативный промпт', required=False, strip=False)
    extra_negative_prompt = forms.CharField(label='Доп. негативный промпт', required=False, strip=False)
    final_exact_composite = forms.BooleanField(label='Точная вклейка', required=False)
    timesteps = forms.IntegerField(label='T', min_value=1, required=True)
    beta_start = forms.FloatField(label='β начальное', min_value=0.0, max_value=1.0, required=True)
    beta_end = forms.FloatField(label='β конечное', min_value=0.0, max_value=1.0, required=True)

    @staticmethod
    def to_form_data(values: dict) -> dict:
        data = {}
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ','.join(repr(float(item)) for item in value)
            data[key] = value
        return data

    def clean_adaptive_candidates(self):
        candidates = parse_float_list(self.cleaned_data.get('adaptive_candidates'))
        if not candidates:
            raise ValidationError('Adaptive candidates must not be empty')
        if any(b <= a for a, b in zip(candidates, candidates[1:])):
            raise ValidationError(f'Adaptive candidates "{candidates}" must be strictly increasing')
        if any(not 0.0 < value <= 1.0 for value in candidates):
            raise ValidationError(f'Adaptive candidates "{candidates}" must lie in (0, 1]')
        return candidates

    def clean_adaptive_factor(self):
        factor = self.cleaned_data.get('adaptive_factor')
        if factor is not None and factor <= 1.0:
            raise ValidationError(f'Adaptive factor "{factor}" must be greater than 1')
        return factor

    def clean(self):
        cleaned_data = super().clean()
        adaptive = cleaned_data.get('adaptive')
        strength = cleaned_data.get('strength')
        if adaptive and strength is not None:
            raise ValidationError('Use either a fixed strength or adaptive strength, not both', code='conflict')
        if not adaptive and strength is None and 'strength' not in self.errors:
            raise ValidationError('A fixed strength is required unless adaptive strength is enabled')
        start, end = cleaned_data.get('beta_start'), cleaned_data.get('beta_end')
        if start is not None and end is not None and end < start:
            raise ValidationError(f'Beta schedule "{start}..{end}" must be nondecreasing')
        return cleaned_data

    def cleaned_config(self) -> dict:
        config = dict(self.cleaned_data)
        for key in ('prompt', 'negative_prompt', 'extra_negative_prompt'):
            config[key] = config.get(key) or ''
        return config


class RectifyOptionsForm(forms.Form):
    """
    Проверка флагов ``rectify`` / ``sweep`` до слияния с конфигурацией.
    """
    image = forms.CharField(label='Изображение', required=True,
                            error_messages={'required': 'the following arguments are required: --image'})
    strength = forms.FloatField(label='Сила управления', required=False)
    adaptive = forms.BooleanField(label='Адаптивная сила', required=False)

    def clean(self):
        cleaned_data = super().clean()
        if cleaned_data.get('adaptive') and cleaned_data.get('strength') is not None:
            raise ValidationError('--strength and --adaptive cannot be used together', code='conflict')
        return cleaned_data

    @property
    def is_conflict(self) -> bool:
        return any(error.code == 'conflict' for error in self.non_field_errors().as_data())


class SweepOptionsForm(forms.Form):
    strengths = forms.CharField(label='Силы', required=True)
    workers = forms.IntegerField(label='Потоки', min_value=1, required=False)

    def clean_strengths(self):
        strengths = parse_float_list(self.cleaned_data.get('strengths'))
        if not strengths:
            raise ValidationError('Sweep needs at least one strength')
        if len(set(strengths)) != len(strengths):
            raise ValidationError(f'Sweep strengths "{strengths}" must be unique')
        if any(not 0.0 <= value <= 1.0 for value in strengths):
            raise ValidationError(f'Sweep strengths "{strengths}" must lie in [0, 1]')
        return strengths


class EvalOptionsForm(forms.Form):
    ref_dir = forms.CharField(label='Эталонный каталог', required=True)
    gen_dir = forms.CharField(label='Каталог генераций', required=True)
    kid_subset_size = forms.IntegerField(label='Размер подвыборки KID', min_value=2, required=True)
    kid_subsets = forms.IntegerField(label='Число подвыборок KID', min_value=1, required=True)
    feature_dim = forms.IntegerField(label='Размерность признаков', min_value=1, required=True)
    seed = forms.IntegerField(label='Сид', min_value=0, max_value=2 ** 64 - 1, required=True)


class TrainOptionsForm(forms.Form):
    manifest = forms.CharField(label='Манифест', required=True,
                               error_messages={'required': 'the following arguments are required: --manifest'})
    steps = forms.IntegerField(label='Шаги', min_value=0, required=True)
    batch_size = forms.IntegerField(label='Размер батча', min_value=1, required=True)
    learning_rate = forms.FloatField(label='Скорость обучения', min_value=0.0, required=True)
    image_size = forms.IntegerField(label='Размер изображения', min_value=8, required=True)
    loss = forms.ChoiceField(label='Потери', choices=[('inpaint', 'inpaint'), ('full', 'full')], required=True)
    caption_dropout = forms.FloatField(label='Пропуск подписи', min_value=0.0, max_value=1.0, required=True)
    seed = forms.IntegerField(label='Сид', min_value=0, max_value=2 ** 64 - 1, required=True)


class GlyphDataOptionsForm(forms.Form):
    count = forms.IntegerField(label='Число глифов', min_value=1, required=True)
    seed = forms.IntegerField(label='Сид', min_value=0, max_value=2 ** 64 - 1, required=True)


class DemoOptionsForm(SweepOptionsForm):
    seeds = forms.IntegerField(label='Число глифов и сидов', min_value=1, required=True)
    data_seed = forms.IntegerField(label='Сид глифов', min_value=0, max_value=2 ** 64 - 1, required=True)
    steps = forms.IntegerField(label='Шаги DDIM', min_value=1, required=True)
    guidance = forms.FloatField(label='Сила guidance', min_value=0.0, required=True)
