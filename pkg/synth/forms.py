from django import forms

from geometry.forms import parse_float_list
from polarisation.services import REFLECTIONS

from .scenes import TEXTURES, Box, Material, NoiseSpec, Plane, Sphere


class SceneLineForm(forms.Form):
    """The optional `scene` line carrying global settings."""

    eta = forms.FloatField(required=False)

    def clean_eta(self):
        eta = self.cleaned_data.get('eta')
        if eta is not None and eta <= 1.0:
            raise forms.ValidationError('Refractive index must exceed 1.')
        return eta


class PrimitiveForm(forms.Form):
    """Material fields shared by every primitive line."""

    albedo = forms.FloatField(required=False, min_value=0.0)
    texture = forms.ChoiceField(required=False, choices=[(t, t) for t in TEXTURES])
    scale = forms.FloatField(required=False)
    contrast = forms.FloatField(required=False, min_value=0.0, max_value=1.0)
    reflection = forms.ChoiceField(required=False, choices=[(r, r) for r in REFLECTIONS])
    reflectance = forms.FloatField(required=False, min_value=0.0)
    ambient = forms.FloatField(required=False, min_value=0.0)
    center = forms.CharField(strip=True)

    def clean_scale(self):
        scale = self.cleaned_data.get('scale')
        if scale is not None and scale <= 0:
            raise forms.ValidationError('Texture scale must be positive.')
        return scale

    def clean_center(self):
        return parse_float_list(self.cleaned_data['center'], 3, 'Center')

    def material(self):
        data = self.cleaned_data
        defaults = Material()
        return Material(
            albedo=defaults.albedo if data.get('albedo') is None else data['albedo'],
            texture=data.get('texture') or defaults.texture,
            texture_scale=data.get('scale') or defaults.texture_scale,
            texture_contrast=defaults.texture_contrast if data.get('contrast') is None else data['contrast'],
            reflection=data.get('reflection') or defaults.reflection,
            reflectance=defaults.reflectance if data.get('reflectance') is None else data['reflectance'],
            ambient=defaults.ambient if data.get('ambient') is None else data['ambient'],
        )


class PlaneForm(PrimitiveForm):
    normal = forms.CharField(strip=True)

    def clean_normal(self):
        normal = parse_float_list(self.cleaned_data['normal'], 3, 'Normal')
        if not any(normal):
            raise forms.ValidationError('Normal must be non-zero.')
        return normal

    def to_primitive(self):
        return Plane(self.cleaned_data['center'], self.cleaned_data['normal'], self.material())


class SphereForm(PrimitiveForm):
    radius = forms.FloatField()

    def clean_radius(self):
        radius = self.cleaned_data['radius']
        if radius <= 0:
            raise forms.ValidationError('Radius must be positive.')
        return radius

    def to_primitive(self):
        return Sphere(self.cleaned_data['center'], self.cleaned_data['radius'], self.material())


class BoxForm(PrimitiveForm):
    size = forms.CharField(strip=True)
    rotvec = forms.CharField(required=False, strip=True)

    def clean_size(self):
        size = parse_float_list(self.cleaned_data['size'], 3, 'Size')
        if min(size) <= 0:
            raise forms.ValidationError('Box size must be positive.')
        return size

    def clean_rotvec(self):
        value = self.cleaned_data.get('rotvec')
        if not value:
            return [0.0, 0.0, 0.0]
        return parse_float_list(value, 3, 'Rotation vector')

    def to_primitive(self):
        data = self.cleaned_data
        return Box(data['center'], data['size'], data['rotvec'], self.material())


PRIMITIVE_FORMS = {
    'plane': PlaneForm,
    'sphere': SphereForm,
    'box': BoxForm,
}


class NoiseForm(forms.Form):
    """`pol=0.01 corr=0.05 struct=0.002 seed=7`; every key is optional."""

    pol = forms.FloatField(required=False, min_value=0.0)
    corr = forms.FloatField(required=False, min_value=0.0)
    struct = forms.FloatField(required=False, min_value=0.0)
    seed = forms.IntegerField(required=False, min_value=0, max_value=2 ** 64 - 1)

    def to_noise(self):
        data = self.cleaned_data
        return NoiseSpec(
            pol=data.get('pol') or 0.0,
            corr=data.get('corr') or 0.0,
            struct=data.get('struct') or 0.0,
            seed=data.get('seed') or 0,
        )
