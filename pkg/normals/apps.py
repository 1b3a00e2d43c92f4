from django.apps import AppConfig


class NormalsConfig(AppConfig):
    name = 'normals'
