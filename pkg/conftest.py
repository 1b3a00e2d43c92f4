import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'crossmodal_depth.settings')
django.setup()
