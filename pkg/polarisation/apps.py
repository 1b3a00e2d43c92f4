from django.apps import AppConfig


class PolarisationConfig(AppConfig):
    name = 'polarisation'
