from django import forms

from .services import INITS, OPTIMIZERS


class SolveOptionsForm(forms.Form):
    """`iterations=500 step=0.01 optimizer=adaptive init=constant seed=3`; every key is optional."""

    iterations = forms.IntegerField(required=False, min_value=1)
    step = forms.FloatField(required=False)
    optimizer = forms.ChoiceField(required=False, choices=[(name, name) for name in OPTIMIZERS])
    momentum = forms.FloatField(required=False, min_value=0.0, max_value=0.999)
    decay = forms.FloatField(required=False)
    init = forms.ChoiceField(required=False, choices=[(name, name) for name in INITS])
    depth = forms.FloatField(required=False)
    noise = forms.FloatField(required=False, min_value=0.0)
    seed = forms.IntegerField(required=False, min_value=0)
    sharpen = forms.BooleanField(required=False)

    def clean_step(self):
        step = self.cleaned_data.get('step')
        if step is not None and step <= 0:
            raise forms.ValidationError('Step size must be positive.')
        return step

    def clean_decay(self):
        decay = self.cleaned_data.get('decay')
        if decay is not None and not 0 < decay <= 1:
            raise forms.ValidationError('Step decay must lie in (0, 1].')
        return decay

    def clean_depth(self):
        depth = self.cleaned_data.get('depth')
        if depth is not None and depth <= 0:
            raise forms.ValidationError('Initial depth must be positive.')
        return depth

    def to_overrides(self):
        names = {'depth': 'initial_depth', 'noise': 'init_noise'}
        overrides = {}
        for key, value in self.cleaned_data.items():
            if value is None or value == '':
                continue
            if key == 'sharpen' and key not in self.data:
                continue
            overrides[names.get(key, key)] = value
        return overrides
