from django import forms

from .cameras import ROLES, CameraModel, Intrinsics, RigidTransform


def parse_float_list(value, count, label):
    parts = [p for p in value.split(',') if p.strip()]
    if len(parts) != count:
        raise forms.ValidationError(f'{label} needs {count} comma-separated numbers.')
    try:
        numbers = [float(p) for p in parts]
    except ValueError:
        raise forms.ValidationError(f'{label} must contain only numbers.')
    if any(n != n or n in (float('inf'), float('-inf')) for n in numbers):
        raise forms.ValidationError(f'{label} must be finite.')
    return numbers


class CameraLineForm(forms.Form):
    """One camera line of a rig description file."""

    role = forms.ChoiceField(choices=[(role, role) for role in ROLES])
    width = forms.IntegerField(min_value=1)
    height = forms.IntegerField(min_value=1)
    fx = forms.FloatField()
    fy = forms.FloatField()
    cx = forms.FloatField()
    cy = forms.FloatField()
    k1 = forms.FloatField(required=False)
    k2 = forms.FloatField(required=False)
    p1 = forms.FloatField(required=False)
    p2 = forms.FloatField(required=False)
    k3 = forms.FloatField(required=False)
    rotation = forms.CharField(required=False, strip=True)
    translation = forms.CharField(required=False, strip=True)

    def clean_fx(self):
        fx = self.cleaned_data['fx']
        if fx <= 0:
            raise forms.ValidationError('Focal length must be positive.')
        return fx

    def clean_fy(self):
        fy = self.cleaned_data['fy']
        if fy <= 0:
            raise forms.ValidationError('Focal length must be positive.')
        return fy

    def clean_rotation(self):
        value = self.cleaned_data.get('rotation')
        if not value:
            return [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        return parse_float_list(value, 9, 'Rotation')

    def clean_translation(self):
        value = self.cleaned_data.get('translation')
        if not value:
            return [0.0, 0.0, 0.0]
        return parse_float_list(value, 3, 'Translation')

    def to_camera(self):
        data = self.cleaned_data
        dist = tuple(data.get(name) or 0.0 for name in ('k1', 'k2', 'p1', 'p2', 'k3'))
        return CameraModel(
            role=data['role'],
            width=data['width'],
            height=data['height'],
            intrinsics=Intrinsics(data['fx'], data['fy'], data['cx'], data['cy'], dist),
            extrinsic=RigidTransform(data['rotation'], data['translation']),
        )
