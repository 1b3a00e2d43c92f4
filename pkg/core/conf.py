from django.conf import settings


def get_setting(name):
    """
    Read one toolkit default from settings.DEPTHKIT.

    Looked up on every call so that override_settings in tests takes effect.
    """
    try:
        return settings.DEPTHKIT[name]
    except KeyError:
        raise KeyError(f'DEPTHKIT has no setting named {name!r}') from None
