from django.apps import AppConfig


class GradientsConfig(AppConfig):
    name = 'gradients'
