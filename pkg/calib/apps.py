from django.apps import AppConfig


class CalibConfig(AppConfig):
    name = 'calib'
