from django.apps import AppConfig


class ItofConfig(AppConfig):
    name = 'itof'
